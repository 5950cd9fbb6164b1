"""Meta-learning with learned mirror descent in the task-adaptation loop."""
from .adaptation import AdaptationConfig, AdaptationTrace, MetaParams, adapt
from .metagrad import MetaGradient, meta_gradient_explicit, meta_gradient_unrolled, g_vector
from .mirror import MirrorMapParams, MirrorMapSpec, identity_map, quadratic_map
from .tasks import TaskFamily, TaskInstance, sample_task
from .trainer import TrainConfig, RunMetrics, train, evaluate

__version__ = "0.1.0"
