from dataclasses import (
    asdict,
    dataclass,
    fields,
    replace,
)
from typing import (
    Any,
    Dict,
    Mapping,
    Tuple,
    get_type_hints,
)

from src.errors import InvalidArgumentError

VARIANTS: Dict[str, Tuple[float, float]] = {
    'full': (1.0, 0.1),
    'vanilla': (0.0, 0.0),
    'instance': (0.0, 1.0),
    'prototype': (1.0, 0.0),
}
"""Loss weights (lambda_prot, lambda_ins) of the named model variants."""
CUSTOM_VARIANT = 'custom'
"""Variant using `lambda_prot` and `lambda_ins` as given, like an empty variant."""

ANCHOR_VIEWS = ('first', 'both')

_TRUE = {'true', '1', 'yes'}
_FALSE = {'false', '0', 'no'}


@dataclass(frozen=True)
class TrainConfig:
    """Training configuration."""

    batch_size: int = 64
    epochs: int = 50
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    codeword_lr_scale: float = 10.0
    """Ratio of the codeword learning rate to the projector one."""
    variant: str = ''
    """Named loss-weight preset (see `VARIANTS`); empty or `custom` to use the lambdas as given."""
    lambda_prot: float = 1.0
    lambda_ins: float = 0.1
    tau: float = 0.2
    """Temperature of the codebook attention."""
    tau_qc: float = 0.2
    """Temperature of the contrastive similarity."""
    M: int = 4
    K: int = 256
    d: int = 15
    theta_init: float = 1.0
    learnable_curvature: bool = True
    levels: Tuple[int, ...] = (200, 100, 50)
    """Cluster counts of the hierarchy levels, finest first."""
    noise_std: float = 0.1
    """Std of the view noise, relative to the per-dimension std of the dataset."""
    mask_prob: float = 0.1
    anchor_views: str = 'first'
    kmeans_iters: int = 20
    seed: int = 0

    @property
    def loss_weights(self) -> Tuple[float, float]:
        """Effective (lambda_prot, lambda_ins)."""
        return VARIANTS.get(self.variant, (self.lambda_prot, self.lambda_ins))

    @property
    def uses_hierarchy(self) -> bool:
        """Whether any loss depends on the hierarchy."""
        return any(w != 0 for w in self.loss_weights)

    def validate(self) -> 'TrainConfig':
        """Check the configuration invariants."""
        positives = {
            'batch_size': self.batch_size,
            'lr_start': self.lr_start,
            'lr_end': self.lr_end,
            'codeword_lr_scale': self.codeword_lr_scale,
            'tau': self.tau,
            'tau_qc': self.tau_qc,
            'M': self.M,
            'K': self.K,
            'theta_init': self.theta_init,
            'kmeans_iters': self.kmeans_iters,
        }
        for key, value in positives.items():
            if value <= 0:
                raise InvalidArgumentError(f'`{key}` must be positive, got {value}')

        if self.seed < 0:
            raise InvalidArgumentError(f'`seed` must be >= 0, got {self.seed}')
        if self.epochs < 0:
            raise InvalidArgumentError(f'`epochs` must be >= 0, got {self.epochs}')
        if self.d < 2:
            raise InvalidArgumentError(f'`d` must be >= 2, got {self.d}')
        if self.K & (self.K - 1):
            raise InvalidArgumentError(f'`K` must be a power of two, got {self.K}')
        if self.variant not in ('', CUSTOM_VARIANT, *VARIANTS):
            raise InvalidArgumentError(
                f'Unknown variant `{self.variant}` (expected one of {sorted([*VARIANTS, CUSTOM_VARIANT])})'
            )
        if self.lambda_prot < 0 or self.lambda_ins < 0:
            raise InvalidArgumentError('Loss weights must be >= 0')
        if not self.levels or any(n < 1 for n in self.levels):
            raise InvalidArgumentError(f'`levels` must be positive counts, got {list(self.levels)}')
        if any(a <= b for a, b in zip(self.levels, self.levels[1:])):
            raise InvalidArgumentError(f'`levels` must be strictly descending, got {list(self.levels)}')
        if self.noise_std < 0:
            raise InvalidArgumentError(f'`noise_std` must be >= 0, got {self.noise_std}')
        if not 0 <= self.mask_prob < 1:
            raise InvalidArgumentError(f'`mask_prob` must lie in [0, 1), got {self.mask_prob}')
        if self.anchor_views not in ANCHOR_VIEWS:
            raise InvalidArgumentError(f'`anchor_views` must be one of {ANCHOR_VIEWS}, got `{self.anchor_views}`')

        return self

    def to_text(self) -> str:
        """Canonical `key=value` rendering, one pair per line."""
        return ''.join(f'{key}={_format_value(value)}\n' for key, value in asdict(self).items())


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, tuple):
        return ','.join(str(v) for v in value)

    return repr(value) if isinstance(value, float) else str(value)


def _parse_value(
    key: str,
    text: str,
    kind: Any,
) -> Any:
    text = text.strip()
    try:
        if kind is bool:
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is str:
            return text
        # Tuple[int, ...]
        return tuple(int(token) for token in text.split(',') if token.strip())
    except ValueError:
        raise InvalidArgumentError(f'Invalid value `{text}` for `{key}`') from None


def apply_overrides(
    config: TrainConfig,
    values: Mapping[str, str],
) -> TrainConfig:
    """
    Override configuration fields from textual values.

    Args:
        config (TrainConfig): The base configuration.
        values (Mapping[str, str]): Field name => textual value.
    """
    hints = get_type_hints(TrainConfig)
    known = {f.name for f in fields(TrainConfig)}

    changes: Dict[str, Any] = {}
    for key, text in values.items():
        if key not in known:
            raise InvalidArgumentError(f'Unknown configuration key `{key}`')
        changes[key] = _parse_value(key, text, hints[key])

    return replace(config, **changes)


def parse_config_text(text: str) -> Dict[str, str]:
    """
    Parse a flat `key=value` document.

    Blank lines and lines starting with `#` are ignored.

    Args:
        text (str): The document.

    Returns:
        Dict[str, str]: Key => textual value.
    """
    values: Dict[str, str] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith('#'):
            continue
        if '=' not in line:
            raise InvalidArgumentError(f'Line {number}: expected `key=value`, got `{line}`')

        key, value = line.split('=', 1)
        values[key.strip()] = value.strip()

    return values


def load_config(
    path: str,
    overrides: Mapping[str, str] = {},
) -> TrainConfig:
    """
    Load a configuration file, then apply overrides.

    Args:
        path (str): The path to the `key=value` file.
        overrides (Mapping[str, str]): Values taking precedence over the file (e.g. command line flags).
    """
    with open(path, 'r') as file:
        values = parse_config_text(file.read())

    values.update(overrides)

    return apply_overrides(TrainConfig(), values).validate()
