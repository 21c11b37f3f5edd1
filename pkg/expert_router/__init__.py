
from .errors import ConfigError, DataError, NumericalError, RouterError
from .config import GenerationSpec, RunConfig, load_generation_spec, load_run_config
from .report_model import DiagnosticReport
