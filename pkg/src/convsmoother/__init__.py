"""ConvNet smoother for dynamical time series, trained on simulated ensembles."""

from .evaluation import ExperimentConfig, build_config, emit_report, run_experiment
from .simulators import GeneratorSpec, TimeGrid, TimeSeries, build_dataset, load_dataset, save_dataset
from .smoother import TrainConfig, TrainedSmoother, build_network, load_model, save_model, smooth, train

__version__ = "0.1.0"
