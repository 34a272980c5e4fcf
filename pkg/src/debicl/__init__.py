"""Class-incremental training with stylized-image debiasing.

The package is organized around six pieces: incremental task/exemplar data
management (`data`), the style-transfer engine that synthesizes cue-conflict
images (`style`), the training objectives (`losses`), the incremental trainer
(`trainer`), the robustness/forgetting evaluation suite (`evaluate`), and the
config-driven experiment runner (`experiment`, `cli`).
"""

__version__ = "0.1.0"

from .errors import ConfigError

__all__ = ["ConfigError", "__version__"]
