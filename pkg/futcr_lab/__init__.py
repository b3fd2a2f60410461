from .experiment import ContinualExperiment, run_experiment


__version__ = '0.1.0'
