"""Eye-image refinement toolkit: synthesis, segmentation, style-based
refinement with adversarial training, and gaze-estimation evaluation."""

__version__ = "0.1.0"

from .core import (  # noqa: F401
    EyeRefineError,
    GazeSample,
    RefinerConfig,
    angular_degrees,
    derive_seed,
    load_config,
    make_rng,
    vector_to_yaw_pitch,
    yaw_pitch_to_vector,
)
