"""
CRNN used by both the clip-supervised teacher and the frame-supervised student.

Three convolution blocks (conv -> batch norm -> LeakyReLU per convolution,
L4-norm pooling after each block) collapse the 64 mel bins and reduce time by
4, a bidirectional GRU follows, then a per-frame sigmoid head. Frame
probabilities are repeated back to the input frame rate.
"""

import math
import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np

from .dsp import LogMelSpec
from .errors import ConfigError, ShapeError
from .layers import BatchNorm, BiGRU, Conv2d, Dense, L4Pool, LeakyReLU, Parameter, Sigmoid
from .seeding import derive_rng

logger = logging.getLogger(__name__)

STUDENT_LABELS = ("Speech", "non-Speech")
BUFFER_SUFFIXES = (".running_mean", ".running_var")


@dataclass(frozen=True)
class CrnnConfig:
    block_channels: Tuple[int, ...] = (32, 128, 128)
    convs_per_block: Tuple[int, ...] = (1, 2, 2)
    pool_strides: Tuple[Tuple[int, int], ...] = ((2, 4), (2, 4), (1, 4))
    gru_hidden: int = 128
    num_outputs: int = 2
    leaky_slope: float = 0.1
    input_dim: int = 64
    labels: Tuple[str, ...] = STUDENT_LABELS
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        # JSON round-trips hand us lists
        object.__setattr__(self, "block_channels", tuple(self.block_channels))
        object.__setattr__(self, "convs_per_block", tuple(self.convs_per_block))
        object.__setattr__(self, "pool_strides", tuple(tuple(s) for s in self.pool_strides))
        object.__setattr__(self, "labels", tuple(self.labels))

        if not len(self.block_channels) == len(self.convs_per_block) == len(self.pool_strides):
            raise ConfigError("block_channels, convs_per_block and pool_strides must have equal length")
        if math.prod(s[1] for s in self.pool_strides) != self.input_dim:
            raise ConfigError(
                f"Frequency pool strides must multiply to input_dim={self.input_dim}, "
                f"got {[s[1] for s in self.pool_strides]}"
            )
        if self.num_outputs < 1:
            raise ConfigError("num_outputs must be >= 1")
        if self.labels and len(self.labels) != self.num_outputs:
            raise ConfigError(f"{len(self.labels)} labels given for {self.num_outputs} outputs")

    @property
    def time_reduction(self) -> int:
        return math.prod(s[0] for s in self.pool_strides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_channels"] = list(self.block_channels)
        d["convs_per_block"] = list(self.convs_per_block)
        d["pool_strides"] = [list(s) for s in self.pool_strides]
        d["labels"] = list(self.labels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CrnnConfig":
        return cls(**d)

    @classmethod
    def teacher(cls, labels: Iterable[str], **overrides) -> "CrnnConfig":
        labels = tuple(labels)
        return cls(num_outputs=len(labels), labels=labels, **overrides)

    def speech_index(self, speech_label: str = "Speech") -> int:
        lowered = [l.lower() for l in self.labels]
        if speech_label.lower() not in lowered:
            raise ConfigError(f"Label {speech_label!r} not among model labels {list(self.labels)}")
        return lowered.index(speech_label.lower())


@dataclass
class FrameProbs:
    """T x E per-frame event probabilities"""
    values: np.ndarray
    frame_hop_s: float = 0.020
    clip_id: str = ""


def time_mask(lengths: np.ndarray, T: int, dtype=np.float32) -> np.ndarray:
    """(B, T) validity flags"""
    return (np.arange(T)[None, :] < np.asarray(lengths)[:, None]).astype(dtype)


class Crnn:
    """The network plus its named parameters and batch-norm buffers"""

    VERSION = 1

    def __init__(self, config: CrnnConfig = CrnnConfig(), seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = derive_rng(seed, "crnn-init")

        self.blocks: List[Tuple[list, L4Pool]] = []
        c_in = 1
        for b, (c_out, n_convs, strides) in enumerate(
                zip(config.block_channels, config.convs_per_block, config.pool_strides)):
            convs = []
            for k in range(n_convs):
                convs.append((
                    Conv2d(f"block{b}.conv{k}", c_in, c_out, rng, self.dtype, config.leaky_slope),
                    BatchNorm(f"block{b}.bn{k}", c_out, self.dtype, config.bn_momentum, config.bn_eps),
                    LeakyReLU(config.leaky_slope),
                ))
                c_in = c_out
            self.blocks.append((convs, L4Pool(*strides)))

        self.rnn = BiGRU("gru", c_in, config.gru_hidden, rng, self.dtype)
        self.head = Dense("head", 2 * config.gru_hidden, config.num_outputs, rng, self.dtype)
        self.sigmoid = Sigmoid()
        self._trace = None

    # ------------------------------------------------------------ parameters

    def layers(self):
        for convs, pool in self.blocks:
            for conv, bn, act in convs:
                yield conv
                yield bn
                yield act
            yield pool
        yield self.rnn
        yield self.head

    def parameters(self) -> List[Parameter]:
        return [p for layer in self.layers() for p in layer.parameters()]

    def buffers(self) -> Dict[str, np.ndarray]:
        out = OrderedDict()
        for layer in self.layers():
            out.update(layer.buffers())
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((p.name, p.data) for p in self.parameters())
        state.update(self.buffers())
        return state

    def copy_state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.copy()) for k, v in self.state_dict().items())

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        current = self.state_dict()
        missing = [k for k in current if k not in state]
        if missing:
            raise ShapeError(f"State is missing tensors: {missing[:5]}")
        for name, target in current.items():
            value = np.asarray(state[name])
            if value.shape != target.shape:
                raise ShapeError(f"{name}: expected {target.shape}, got {value.shape}")
            target[...] = value

    # ------------------------------------------------------------ forward / backward

    def forward(self, x: np.ndarray, lengths: Optional[np.ndarray] = None, training: bool = False) -> np.ndarray:
        """(B, T, D) log-Mel batch -> (B, T, E) frame probabilities.

        Frames at or beyond an item's length are treated as padding: they never
        influence the valid frames of that item, batch statistics included.
        """
        if x.ndim != 3 or x.shape[2] != self.config.input_dim:
            raise ShapeError(f"Expected (B, T, {self.config.input_dim}) input, got {x.shape}")
        B, T, _ = x.shape
        lengths = np.full(B, T, dtype=np.int64) if lengths is None else np.asarray(lengths, dtype=np.int64)
        if lengths.shape != (B,) or lengths.min() < 1 or lengths.max() > T:
            raise ShapeError(f"lengths {lengths} invalid for batch of shape {x.shape}")

        masks = []
        mask = time_mask(lengths, T, self.dtype)[:, None, :, None]
        h = x.astype(self.dtype, copy=False)[:, None] * mask
        for convs, pool in self.blocks:
            for conv, bn, act in convs:
                h = conv.forward(h)
                h = bn.forward(h, mask=mask, training=training)
                h = act.forward(h) * mask
                masks.append(mask)
            h = pool.forward(h)
            lengths = -(-lengths // pool.stride_t)
            mask = time_mask(lengths, h.shape[2], self.dtype)[:, None, :, None]

        _, C, t_red, d_red = h.shape
        seq = h.transpose(0, 2, 1, 3).reshape(B, t_red, C * d_red)
        probs = self.sigmoid.forward(self.head.forward(self.rnn.forward(seq, lengths)))

        factor = self.config.time_reduction
        self._trace = (masks, (B, C, t_red, d_red), T)
        return np.repeat(probs, factor, axis=1)[:, :T]

    def backward(self, grad_probs: np.ndarray):
        """Accumulate parameter gradients for dLoss/dProbs of the last forward"""
        if self._trace is None:
            raise RuntimeError("backward() called before forward()")
        masks, (B, C, t_red, d_red), T = self._trace
        factor = self.config.time_reduction
        E = grad_probs.shape[-1]

        full = np.zeros((B, t_red * factor, E), dtype=grad_probs.dtype)
        full[:, :T] = grad_probs
        g = full.reshape(B, t_red, factor, E).sum(axis=2)
        g = self.rnn.backward(self.head.backward(self.sigmoid.backward(g)))
        g = g.reshape(B, t_red, C, d_red).transpose(0, 2, 1, 3)

        for convs, pool in reversed(self.blocks):
            g = pool.backward(g)
            for conv, bn, act in reversed(convs):
                g = g * masks.pop()
                g = conv.backward(bn.backward(act.backward(g)))


def crnn_forward(spec: LogMelSpec, model: Crnn, mode: str = "eval") -> FrameProbs:
    """Single-clip convenience wrapper returning (T, E) probabilities"""
    probs = model.forward(spec.values[None], training=(mode == "train"))[0]
    return FrameProbs(values=probs, frame_hop_s=spec.frame_hop_s, clip_id=spec.clip_id)


def count_params(params: Union[Crnn, Iterable[Parameter], Dict[str, np.ndarray]]) -> int:
    """Number of trainable values (running statistics excluded)"""
    if isinstance(params, Crnn):
        params = params.parameters()
    if isinstance(params, dict):
        return int(sum(v.size for k, v in params.items() if not k.endswith(BUFFER_SUFFIXES)))
    return int(sum(p.size for p in params))
