"""Configuration, measurement logs, metrics, runners and the command line."""
from .config import ObservabilityConfig, ScenarioConfig, load_config, load_observability_config
from .logio import MeasurementLog, read_log, write_log
from .montecarlo import run_montecarlo
from .runner import RunResult, run_log, run_scenario, simulate_scenario
