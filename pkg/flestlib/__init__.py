from .api import FLESTExperiment
from .config import ExperimentConfig, load_config
from .enums import Direction, Split, TrainingMode

from . import data
from . import enums
from . import errors
from . import evaluation
from . import federation
from . import model
from . import tensor
