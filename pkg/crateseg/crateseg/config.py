import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple, Union

from .exceptions import ConfigurationError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

ATTENTION_VARIANTS = ("MSSA", "MHSA")
MLP_VARIANTS = ("ISTA", "MLP")
ISTA_ACTIVATIONS = ("relu", "soft")
SUBSPACE_INITS = ("kaiming", "orthonormal")

# --arch name -> (attention_variant, mlp_variant, ista_activation)
ARCHITECTURES = {
    "crate": ("MSSA", "ISTA", "relu"),
    "crate-sth": ("MSSA", "ISTA", "soft"),
    "crate-mlp": ("MSSA", "MLP", "relu"),
    "crate-mhsa": ("MHSA", "ISTA", "relu"),
    "vit": ("MHSA", "MLP", "relu"),
}


@dataclass
class ModelConfig:
    """
    Hyperparameters of a CRATE model and its ablation variants.

    Attributes
    ----------
    num_layers : int
        Number of layers L. Zero is accepted by the library (embedding + head only).
    model_dim : int
        Token dimension d.
    num_heads : int
        Number of subspaces / attention heads K.
    head_dim : int
        Subspace dimension p, with K * p == d.
    image_shape : tuple of int
        Input image shape (C, H, W).
    patch_shape : tuple of int
        Patch shape (P_H, P_W); must divide (H, W).
    epsilon : float
        Quantization error used by the coding-rate objective.
    sparsity : float
        Sparsity weight lambda of the ISTA block.
    ista_step : float
        Step size eta of the ISTA block.
    num_classes : int
        Number of classifier outputs.
    attention_variant : str
        "MSSA" (shared projection per head) or "MHSA" (separate query/key/value).
    mlp_variant : str
        "ISTA" (sparsification step) or "MLP" (two-layer GELU perceptron).
    mlp_hidden : int
        Hidden width of the MLP variant.
    ista_activation : str
        "relu" (nonnegative LASSO step) or "soft" (soft-thresholding, no sign constraint).
    subspace_init : str
        "kaiming" (uniform fan-in scaling) or "orthonormal" (each U_k has orthonormal columns).
    pixel_mean : float
        Subtracted from every pixel before patch embedding.
    pixel_std : float
        Pixels are divided by it after the mean is removed.
    """
    num_layers: int = 4
    model_dim: int = 64
    num_heads: int = 4
    head_dim: int = 16
    image_shape: Tuple[int, int, int] = (3, 32, 32)
    patch_shape: Tuple[int, int] = (8, 8)
    epsilon: float = 1.0
    sparsity: float = 0.1
    ista_step: float = 0.1
    num_classes: int = 3
    attention_variant: str = "MSSA"
    mlp_variant: str = "ISTA"
    mlp_hidden: int = 256
    ista_activation: str = "relu"
    subspace_init: str = "kaiming"
    pixel_mean: float = 0.5
    pixel_std: float = 0.25

    def __post_init__(self):
        self.image_shape = tuple(int(v) for v in self.image_shape)
        self.patch_shape = tuple(int(v) for v in self.patch_shape)
        self.validate()

    def validate(self):
        positive = {
            "model_dim": self.model_dim,
            "num_heads": self.num_heads,
            "head_dim": self.head_dim,
            "num_classes": self.num_classes,
            "mlp_hidden": self.mlp_hidden,
        }
        for name, value in positive.items():
            if value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value}")
        if self.num_layers < 0:
            raise ConfigurationError(f"num_layers must be nonnegative, got {self.num_layers}")
        if self.num_heads * self.head_dim != self.model_dim:
            raise ConfigurationError(
                f"num_heads * head_dim must equal model_dim: {self.num_heads} * {self.head_dim} != {self.model_dim}"
            )
        if len(self.image_shape) != 3 or min(self.image_shape) < 1:
            raise ConfigurationError(f"image_shape must be three positive integers (C, H, W), got {self.image_shape}")
        if len(self.patch_shape) != 2 or min(self.patch_shape) < 1:
            raise ConfigurationError(f"patch_shape must be two positive integers, got {self.patch_shape}")
        _, height, width = self.image_shape
        if height % self.patch_shape[0] or width % self.patch_shape[1]:
            raise ConfigurationError(
                f"Patch shape {self.patch_shape} does not divide image size {(height, width)}"
            )
        if self.epsilon <= 0:
            raise ConfigurationError(f"epsilon must be positive, got {self.epsilon}")
        if self.sparsity < 0:
            raise ConfigurationError(f"sparsity must be nonnegative, got {self.sparsity}")
        if self.ista_step <= 0:
            raise ConfigurationError(f"ista_step must be positive, got {self.ista_step}")
        if not self.pixel_std > 0:
            raise ConfigurationError(f"pixel_std must be positive, got {self.pixel_std}")
        _check_choice("attention_variant", self.attention_variant, ATTENTION_VARIANTS)
        _check_choice("mlp_variant", self.mlp_variant, MLP_VARIANTS)
        _check_choice("ista_activation", self.ista_activation, ISTA_ACTIVATIONS)
        _check_choice("subspace_init", self.subspace_init, SUBSPACE_INITS)

    @property
    def grid_shape(self) -> Tuple[int, int]:
        return (self.image_shape[1] // self.patch_shape[0], self.image_shape[2] // self.patch_shape[1])

    @property
    def num_patches(self) -> int:
        rows, cols = self.grid_shape
        return rows * cols

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.image_shape[0] * self.patch_shape[0] * self.patch_shape[1]

    @property
    def architecture(self) -> Optional[str]:
        key = (self.attention_variant, self.mlp_variant, self.ista_activation)
        return next((name for name, value in ARCHITECTURES.items() if value == key), None)

    @classmethod
    def for_architecture(cls, arch: str, **kwargs) -> "ModelConfig":
        """ Build a config for one of the named ablation variants (crate, crate-sth, crate-mlp, crate-mhsa, vit) """
        if arch not in ARCHITECTURES:
            raise ConfigurationError(f"Unknown architecture '{arch}', expected one of {sorted(ARCHITECTURES)}")
        attention_variant, mlp_variant, ista_activation = ARCHITECTURES[arch]
        return cls(
            attention_variant=attention_variant,
            mlp_variant=mlp_variant,
            ista_activation=ista_activation,
            **kwargs,
        )

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["image_shape"] = list(self.image_shape)
        data["patch_shape"] = list(self.patch_shape)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        known = {name for name in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"Unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**data)


def _check_choice(name: str, value: str, choices: Iterable[str]):
    if value not in choices:
        raise ConfigurationError(f"{name} must be one of {tuple(choices)}, got '{value}'")


def load_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """
    Read a TOML or JSON config file. Keys mirror the long flag names, with
    dashes allowed in place of underscores.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"Config file {path} does not exist")
    if path.suffix == ".toml":
        with open(path, "rb") as f:
            data = tomllib.load(f)
    elif path.suffix == ".json":
        with open(path, "r") as f:
            data = json.load(f)
    else:
        raise ConfigurationError(f"Config file {path} must be .toml or .json")
    if not isinstance(data, dict):
        raise ConfigurationError(f"Config file {path} must contain a table of flag values")
    return {key.replace("-", "_"): value for key, value in data.items()}


@dataclass
class RunConfig:
    """
    The resolved parameters of one CLI invocation.

    Values are resolved as: flag defaults < config file < flags given explicitly
    on the command line.
    """
    command: str
    values: Dict[str, Any] = field(default_factory=dict)

    # keys that only locate files for this run and are left out of the echo
    LOCATION_KEYS = ("out", "config")

    @classmethod
    def resolve(
        cls,
        command: str,
        defaults: Dict[str, Any],
        explicit: Dict[str, Any],
        config_file: Optional[Union[str, Path]] = None,
    ) -> "RunConfig":
        values = dict(defaults)
        if config_file is not None:
            file_values = load_config_file(config_file)
            unknown = set(file_values) - set(defaults)
            if unknown:
                raise ConfigurationError(f"Unknown keys in {config_file} for '{command}': {sorted(unknown)}")
            values.update(file_values)
        values.update(explicit)
        logger.debug("Resolved %s config: %s", command, values)
        return cls(command, values)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def get(self, key: str, default: Any = None) -> Any:
        return self.values.get(key, default)

    def to_dict(self) -> Dict[str, Any]:
        echoed = {
            key: (str(value) if isinstance(value, Path) else value)
            for key, value in self.values.items()
            if key not in self.LOCATION_KEYS
        }
        return {"command": self.command, "values": echoed}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        return cls(data["command"], dict(data["values"]))

    def write(self, out_dir: Union[str, Path]) -> Path:
        """ Write the resolved config to <out_dir>/reports/config.json """
        path = Path(out_dir) / "reports" / "config.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
        return path
