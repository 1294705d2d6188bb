"""
Unfolded RPCA network.

Each stage refines a (background, target, reconstruction) triple:

    B_k = (D_{k-1} - T_{k-1}) + F_k(D_{k-1} - T_{k-1})
    R_k = T_{k-1} + D_{k-1} - B_k
    T_k = R_k - eps_k * G_k(R_k)
    D_k = M_k(B_k + T_k)

starting from D_0 = X and T_0 = 0. F_k and M_k are conv/BN/ReLU stacks, G_k
is a conv/ReLU stack without normalization, eps_k is a learnable scalar.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .core import BatchNormParams, ConvBlock, ConvLayerParams, ShapeError, Tensor, conv2d

EPSILON_INIT = 0.01


@dataclass(frozen=True)
class ModelConfig:
    stages: int = 6
    channels: int = 32
    bem_mid_layers: int = 3
    tem_mid_layers: int = 6
    irm_mid_layers: int = 3

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"ModelConfig.{name} must be an integer >= 1, got {value!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: int(v) for k, v in d.items()})


class ProxNet:
    """
    Input conv block, ``mid_layers`` C->C blocks, and a bare C->1 output conv.

    With ``batch_norm=True`` every hidden block is Conv -> BN -> ReLU,
    otherwise Conv -> ReLU.
    """

    def __init__(self, channels: int, mid_layers: int, batch_norm: bool, rng: np.random.Generator):
        def block(cin, cout):
            norm = BatchNormParams.fresh(cout) if batch_norm else None
            return ConvBlock(ConvLayerParams.kaiming(cin, cout, rng), norm)

        self.blocks = [block(1, channels)] + [block(channels, channels) for _ in range(mid_layers)]
        self.head = ConvLayerParams.kaiming(channels, 1, rng)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        for blk in self.blocks:
            x = blk(x, training)
        return conv2d(x, self.head)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i, blk in enumerate(self.blocks):
            for k, t in blk.conv.parameters().items():
                out[f"{prefix}.block{i}.conv.{k}"] = t
            if blk.norm is not None:
                for k, t in blk.norm.parameters().items():
                    out[f"{prefix}.block{i}.bn.{k}"] = t
        for k, t in self.head.parameters().items():
            out[f"{prefix}.head.{k}"] = t
        return out

    def named_buffers(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, blk in enumerate(self.blocks):
            if blk.norm is not None:
                for k, b in blk.norm.buffers().items():
                    out[f"{prefix}.block{i}.bn.{k}"] = b
        return out

    def zero_head(self) -> None:
        self.head.weight.data[...] = 0.0
        self.head.bias.data[...] = 0.0


@dataclass
class StageParams:
    bem: ProxNet
    tem: ProxNet
    epsilon: Tensor
    irm: ProxNet

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out = self.bem.named_parameters(f"{prefix}.bem")
        out.update(self.tem.named_parameters(f"{prefix}.tem"))
        out[f"{prefix}.tem.epsilon"] = self.epsilon
        out.update(self.irm.named_parameters(f"{prefix}.irm"))
        return out

    def named_buffers(self, prefix: str) -> dict[str, np.ndarray]:
        out = self.bem.named_buffers(f"{prefix}.bem")
        out.update(self.irm.named_buffers(f"{prefix}.irm"))
        return out


@dataclass
class DecompositionTrace:
    background: list[np.ndarray] = field(default_factory=list)
    target: list[np.ndarray] = field(default_factory=list)
    reconstruction: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.background)


def _check_same(*tensors: Tensor) -> None:
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError(f"stage inputs must share a shape, got {shape} and {t.shape}")


def init_model(config: ModelConfig, seed: int) -> list[StageParams]:
    """Independent per-stage parameters with Kaiming-normal convs and eps = 0.01."""
    rng = np.random.default_rng(seed)
    c = config.channels
    stages = []
    for _ in range(config.stages):
        bem = ProxNet(c, config.bem_mid_layers, batch_norm=True, rng=rng)
        tem = ProxNet(c, config.tem_mid_layers, batch_norm=False, rng=rng)
        eps = Tensor(np.array(EPSILON_INIT), requires_grad=True)
        irm = ProxNet(c, config.irm_mid_layers, batch_norm=True, rng=rng)
        stages.append(StageParams(bem, tem, eps, irm))
    return stages


def param_count(stages: list[StageParams]) -> int:
    """Trainable scalars: conv weights and biases, BN affine terms and each eps."""
    return sum(t.size for k, s in enumerate(stages) for t in s.named_parameters(f"s{k}").values())


def bem_forward(d_prev: Tensor, t_prev: Tensor, bem: ProxNet, training: bool = True) -> Tensor:
    _check_same(d_prev, t_prev)
    residual = d_prev - t_prev
    return residual + bem(residual, training)


def tem_forward(
    d_prev: Tensor,
    t_prev: Tensor,
    b_k: Tensor,
    tem: ProxNet,
    epsilon: Tensor,
    training: bool = True,
) -> Tensor:
    _check_same(d_prev, t_prev, b_k)
    r = t_prev + d_prev - b_k
    return r - epsilon * tem(r, training)


def irm_forward(b_k: Tensor, t_k: Tensor, irm: ProxNet, training: bool = True) -> Tensor:
    _check_same(b_k, t_k)
    return irm(b_k + t_k, training)


class RPCANet:
    """
    Stack of unfolded stages.

    ``forward`` returns the last target map as raw logits and the last
    reconstruction; pass ``want_trace=True`` to also collect every stage's
    B, T and D as numpy arrays.
    """

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        self.stages = init_model(self.config, seed)
        self.training = True

    def train(self) -> "RPCANet":
        self.training = True
        return self

    def eval(self) -> "RPCANet":
        self.training = False
        return self

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for k, stage in enumerate(self.stages, start=1):
            out.update(stage.named_parameters(f"stage{k}"))
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for k, stage in enumerate(self.stages, start=1):
            out.update(stage.named_buffers(f"stage{k}"))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: t.data.copy() for name, t in self.named_parameters().items()}
        state.update({name: b.copy() for name, b in self.named_buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        buffers = self.named_buffers()
        expected = set(params) | set(buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))[:3]
            extra = sorted(set(state) - expected)[:3]
            raise ShapeError(f"state dict mismatch: missing {missing}, unexpected {extra}")
        for name, t in params.items():
            if state[name].shape != t.shape:
                raise ShapeError(f"{name}: shape {state[name].shape} != {t.shape}")
            t.data[...] = state[name]
        for name, b in buffers.items():
            b[...] = state[name]

    def num_parameters(self) -> int:
        return param_count(self.stages)

    def zero_grad(self) -> None:
        for t in self.named_parameters().values():
            t.grad = None

    def forward(self, x: Tensor, want_trace: bool = False):
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"RPCANet expects a (N, 1, H, W) input, got shape {x.shape}")
        trace = DecompositionTrace() if want_trace else None
        d = x
        t = Tensor.zeros(x.shape)
        for stage in self.stages:
            b = bem_forward(d, t, stage.bem, self.training)
            t = tem_forward(d, t, b, stage.tem, stage.epsilon, self.training)
            d = irm_forward(b, t, stage.irm, self.training)
            if trace is not None:
                trace.background.append(b.data.copy())
                trace.target.append(t.data.copy())
                trace.reconstruction.append(d.data.copy())
        if want_trace:
            return t, d, trace
        return t, d

    __call__ = forward
