from .experiments import (ExperimentConfig, SweepResult, load_config, run_experiment, run_sweep,
                          sample_initial, t_epsilon_report)
from .io import read_record, write_csv, write_record, write_svg

__all__ = ["ExperimentConfig", "SweepResult", "load_config", "run_experiment", "run_sweep",
           "sample_initial", "t_epsilon_report", "read_record", "write_csv", "write_record", "write_svg"]
