"""Update-journaled training, data removal (naive retraining, relabel
unlearning, amnesiac unlearning) and the privacy attacks used to audit it."""

from amnesiac.data import Dataset, Selector, load_idx, split, synth_blobs, write_idx
from amnesiac.journal import BatchKey, Journal, Mode
from amnesiac.nn import (
    Architecture,
    Model,
    ParamDelta,
    ParamVector,
    TrainConfig,
    accuracy,
    backward,
    forward,
    init_model,
    sgd_step,
    train,
)

__version__ = "0.1.0"
