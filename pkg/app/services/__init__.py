from .experiment_runner import (
    LIBRARY_VERSION,
    ConfigValidationError,
    ExperimentConfig,
    ResultBundle,
    export_config,
    export_schedule,
    load_config,
    run,
    run_batch,
    validate_config,
)

__all__ = [
    'LIBRARY_VERSION',
    'ConfigValidationError',
    'ExperimentConfig',
    'ResultBundle',
    'export_config',
    'export_schedule',
    'load_config',
    'run',
    'run_batch',
    'validate_config',
]
