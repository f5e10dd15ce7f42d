"""Active speaker detection trained from voice activity labels alone."""

from .errors import ActiveSpeakerError, DataError, DimensionMismatchError, NumericalError, ParseError
from .model import BoxObservation, FrameSample, ModelWeights, TrackedDataset, load_model, save_model
from .latent import TrainConfig, train_latent
from .adapt import HarvestConfig, WeightedSample, harvest_samples, train_specific, train_specific_models
from .online import OnlineSchedule, run_online
from .data import SynthConfig, generate_synthetic, load_dataset, save_dataset

__version__ = "0.1.0"
