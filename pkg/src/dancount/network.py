"""Basic architecture and the three density-adaption networks.

All three networks (DAN, LCN, HCN) carry their own copy of the base
convolutions; they start from identical weights and diverge during
fine-tuning.
"""

from __future__ import annotations

import numpy as np

from .autodiff import ConvSpec, Tensor, conv2d, relu, softmax_channels
from .errors import ValidationError

# (name, in, out, dilation) for the 3x3 trunk
BASE_LAYERS = (
    ("conv1_1", 3, 24, 1),
    ("conv1_2", 24, 24, 1),
    ("conv1_3", 24, 24, 1),
    ("conv2", 24, 48, 2),
    ("conv3", 48, 24, 4),
    ("conv4", 24, 12, 2),
    ("conv5", 12, 12, 1),
)
FEATURE_CHANNELS = 12
DENSITY_INIT_GAIN = 0.01

ROLE_BASE = "base"
ROLE_DENSITY = "density-head"
ROLE_COUNT = "count-head"
ROLE_CLASS = "class-head"


def head_geometry(input_size: int, grid: tuple[int, int]) -> tuple[int, int]:
    """Kernel (= stride) extents of the local sum / classify heads."""
    rows, cols = grid
    if rows < 1 or cols < 1 or input_size % rows or input_size % cols:
        raise ValidationError(f"grid {rows}x{cols} does not divide input size {input_size}")
    return input_size // rows, input_size // cols


def _uniform_conv(rng, out_c, in_c, kh, kw, gain, dtype) -> np.ndarray:
    fan_in = in_c * kh * kw
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=(out_c, in_c, kh, kw)).astype(dtype)


class Network:
    """Ordered collection of named convolutions with role tags."""

    def __init__(self):
        self.layers: dict[str, ConvSpec] = {}
        self.roles: dict[str, str] = {}

    def _add(self, name, spec: ConvSpec, role: str) -> None:
        self.layers[name] = spec
        self.roles[name] = role
        spec.kernel.name = f"{name}.weight"
        if spec.bias is not None:
            spec.bias.name = f"{name}.bias"

    def parameters(self, roles=None) -> dict[str, Tensor]:
        out = {}
        for name, spec in self.layers.items():
            if roles is not None and self.roles[name] not in roles:
                continue
            out[f"{name}.weight"] = spec.kernel
            if spec.bias is not None:
                out[f"{name}.bias"] = spec.bias
        return out

    def parameter_roles(self) -> dict[str, str]:
        return {
            pname: self.roles[pname.rsplit(".", 1)[0]] for pname in self.parameters()
        }

    def num_parameters(self, roles=None) -> int:
        return sum(p.data.size for p in self.parameters(roles).values())

    def set_trainable(self, roles=None) -> None:
        """Enable gradients for the given roles (all when None), disable the rest."""
        for name, spec in self.layers.items():
            on = roles is None or self.roles[name] in roles
            spec.kernel.requires_grad = on
            if spec.bias is not None:
                spec.bias.requires_grad = on

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = self.parameters()
        if strict and set(state) != set(own):
            raise ValidationError(
                f"parameter names differ: missing {sorted(set(own) - set(state))}, "
                f"unexpected {sorted(set(state) - set(own))}"
            )
        for name, arr in state.items():
            if name not in own:
                continue
            if own[name].shape != arr.shape:
                raise ValidationError(
                    f"shape mismatch for {name}: checkpoint {arr.shape} vs model {own[name].shape}"
                )
            own[name].data = np.array(arr, dtype=own[name].dtype)

    def astype(self, dtype) -> "Network":
        for p in self.parameters().values():
            p.data = p.data.astype(dtype)
        return self


class BasicArchitecture(Network):
    """conv1_1..conv5 (3x3, dilations 1,1,1,2,4,2,1, ReLU) plus a 1x1 density head."""

    def __init__(self, rng=None, dtype=np.float32):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        for name, cin, cout, d in BASE_LAYERS:
            w = _uniform_conv(rng, cout, cin, 3, 3, np.sqrt(2.0), dtype)
            spec = ConvSpec(Tensor(w), Tensor(np.zeros(cout, dtype)), stride=1, dilation=d, padding=d)
            self._add(name, spec, ROLE_BASE)
        # near-zero density head: untrained counts start close to 0 instead of thousands
        w = _uniform_conv(rng, 1, FEATURE_CHANNELS, 1, 1, DENSITY_INIT_GAIN, dtype)
        self._add("density", ConvSpec(Tensor(w), Tensor(np.zeros(1, dtype))), ROLE_DENSITY)

    def features(self, x: Tensor) -> Tensor:
        h = x
        for name, *_ in BASE_LAYERS:
            h = relu(conv2d(h, self.layers[name]))
        return h

    def density(self, features: Tensor) -> Tensor:
        return conv2d(features, self.layers["density"])

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Return (conv5 features, raw density map)."""
        _check_image(x)
        f = self.features(x)
        return f, self.density(f)


def _check_image(x: Tensor, size: int | None = None) -> None:
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValidationError(f"expected image batch (N, 3, H, W), got {x.shape}")
    if size is not None and x.shape[2:] != (size, size):
        raise ValidationError(f"expected {size}x{size} input, got {x.shape[2]}x{x.shape[3]}")


class _Headed(Network):
    def __init__(self, base: BasicArchitecture, input_size: int, grid: tuple[int, int]):
        super().__init__()
        self.input_size = input_size
        self.grid = tuple(grid)
        self.kernel_hw = head_geometry(input_size, self.grid)
        for name, spec in base.layers.items():
            self._add(name, spec, base.roles[name])

    def base_view(self) -> BasicArchitecture:
        base = BasicArchitecture.__new__(BasicArchitecture)
        Network.__init__(base)
        for name, spec in self.layers.items():
            if self.roles[name] in (ROLE_BASE, ROLE_DENSITY):
                base._add(name, spec, self.roles[name])
        return base

    def base_features(self, x: Tensor) -> tuple[Tensor, Tensor]:
        _check_image(x, self.input_size)
        h = x
        for name, *_ in BASE_LAYERS:
            h = relu(conv2d(h, self.layers[name]))
        return h, conv2d(h, self.layers["density"])


class CounterNetwork(_Headed):
    """Base + local-sum head (kernel = stride = cell size, 1 -> 1 channel)."""

    def __init__(self, base: BasicArchitecture, input_size: int, grid: tuple[int, int]):
        super().__init__(base, input_size, grid)
        kh, kw = self.kernel_hw
        dtype = base.layers["density"].kernel.dtype
        spec = ConvSpec(Tensor(np.ones((1, 1, kh, kw), dtype)), Tensor(np.zeros(1, dtype)), stride=kh)
        if kh != kw:
            raise ValidationError("non-square cells need square grids on square inputs")
        self._add("local_sum", spec, ROLE_COUNT)

    def count_head(self, density: Tensor) -> Tensor:
        return conv2d(density, self.layers["local_sum"])

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Return (density, counts)."""
        _, density = self.base_features(x)
        return density, self.count_head(density)


class DensityAdaptionNetwork(_Headed):
    """Base + cell-sized 12 -> 12 conv, ReLU, then 1x1 12 -> 2 class logits."""

    def __init__(self, base: BasicArchitecture, input_size: int, grid: tuple[int, int], rng=None):
        super().__init__(base, input_size, grid)
        rng = np.random.default_rng(1) if rng is None else rng
        kh, kw = self.kernel_hw
        if kh != kw:
            raise ValidationError("non-square cells need square grids on square inputs")
        dtype = base.layers["density"].kernel.dtype
        c = FEATURE_CHANNELS
        w = _uniform_conv(rng, c, c, kh, kw, np.sqrt(2.0), dtype)
        self._add("classify", ConvSpec(Tensor(w), Tensor(np.zeros(c, dtype)), stride=kh), ROLE_CLASS)
        w = _uniform_conv(rng, 2, c, 1, 1, 1.0, dtype)
        self._add("classify_out", ConvSpec(Tensor(w), Tensor(np.zeros(2, dtype))), ROLE_CLASS)

    def logits_head(self, features: Tensor) -> Tensor:
        h = relu(conv2d(features, self.layers["classify"]))
        return conv2d(h, self.layers["classify_out"])

    def forward_logits(self, x: Tensor) -> tuple[Tensor, Tensor]:
        features, density = self.base_features(x)
        return density, self.logits_head(features)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Return (density, class probabilities)."""
        density, logits = self.forward_logits(x)
        return density, softmax_channels(logits)


def _clone_base(base: BasicArchitecture) -> BasicArchitecture:
    clone = BasicArchitecture.__new__(BasicArchitecture)
    Network.__init__(clone)
    for name, spec in base.layers.items():
        copy = ConvSpec(
            Tensor(spec.kernel.data.copy()),
            None if spec.bias is None else Tensor(spec.bias.data.copy()),
            stride=spec.stride,
            dilation=spec.dilation,
            padding=spec.padding,
        )
        clone._add(name, copy, base.roles[name])
    return clone


def build_networks(input_size: int, grid: tuple[int, int], seed: int, base=None, dtype=np.float32):
    """Create (dan, lcn, hcn) with identical base weights.

    ``base`` (a BasicArchitecture or its state dict) overrides the seeded
    base initialisation, e.g. when starting from a pretrained checkpoint.
    """
    head_geometry(input_size, grid)
    rng = np.random.default_rng(seed)
    template = BasicArchitecture(rng, dtype=dtype)
    if isinstance(base, BasicArchitecture):
        template.load_state_dict(base.state_dict())
    elif base is not None:
        template.load_state_dict(base)
    dan = DensityAdaptionNetwork(_clone_base(template), input_size, grid, rng=rng)
    lcn = CounterNetwork(_clone_base(template), input_size, grid)
    hcn = CounterNetwork(_clone_base(template), input_size, grid)
    return dan, lcn, hcn


def build_base(seed: int, dtype=np.float32) -> BasicArchitecture:
    """The base exactly as :func:`build_networks` would initialise it."""
    return BasicArchitecture(np.random.default_rng(seed), dtype=dtype)


def predict_class_map(class_probs) -> np.ndarray:
    """Per-cell argmax over the 2 channels; ties go to class 0 (low density)."""
    p = class_probs.data if isinstance(class_probs, Tensor) else np.asarray(class_probs)
    if p.ndim != 4 or p.shape[1] != 2:
        raise ValidationError(f"class probabilities must be (N, 2, H, W), got {p.shape}")
    return (p[:, 1] > p[:, 0]).astype(np.int64)
