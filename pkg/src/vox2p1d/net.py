"""The per-branch 1D classification network, trained from scratch.

Architecture (input J x W x H x K pooled feature maps):

    C1 conv(3,1,1) -> 32 ch   S1 mix J -> J/2
    C2 conv(3,1,1) -> 32 ch   S2 mix J/2 -> J/4
    C3 conv(3,1,1) -> 64 ch   S3 mix J/4 -> J/8
    C4 conv(1,1,1) -> 128 ch  FC 128*W*H*(J/8) -> 2 (softmax)

Channel-mix convolutions slide a (P, 1, 1) kernel along the slice axis
(zero padding, so the slice count is preserved) and remap channels,
independently at every (w, h). Slice-mix layers linearly recombine
slices with weights shared across (w, h, ch). All hidden activations
are ReLU; halvings use floor division. Gradients are exact analytic
derivatives of the forward pass.

Convolutions are evaluated as one GEMM per layer: with per-offset
products Y[n, p] = W_p . x[n], the output is
pre[n] = Y[n-1, 0] + Y[n, 1] + Y[n+1, 2] (P = 3), realized as shifted
view additions. ``StackedNets`` trains several same-shaped branches in
lockstep by giving every array a leading group axis, which amortizes
interpreter overhead across branches; each branch still follows its own
seed-derived shuffle and weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .rng import SplitMix64Stream, derive_seed, fnv1a64, splitmix64

PROB_CLAMP = 1e-7

CHANNEL_WIDTHS = (32, 32, 64, 128)  # C1..C4 output channels
CONV_KERNELS = (3, 3, 3, 1)  # slice-axis kernel sizes

TRAIN_DTYPE = np.float32  # stacked branch training; Net1D itself is float64


@dataclass
class ChannelConv:
    """(P,1,1) convolution along slices mixing channels.

    ``weights[p, ci, co]`` multiplies the input slice at offset
    p - (P-1)//2 relative to the output slice; out-of-range slices
    contribute zero.
    """

    weights: np.ndarray  # (P, c_in, c_out)
    bias: np.ndarray  # (c_out,)

    def _wcat(self) -> np.ndarray:
        p, cin, cout = self.weights.shape
        return np.ascontiguousarray(self.weights.transpose(1, 0, 2)).reshape(
            cin, p * cout
        )

    def pre(self, x: np.ndarray) -> np.ndarray:
        p, cin, cout = self.weights.shape
        b, j, w, h, _ = x.shape
        z = np.ascontiguousarray(x).reshape(-1, cin)
        y = (z @ self._wcat()).reshape(b, j, w, h, p, cout)
        if p == 1:
            out = y[..., 0, :]
        else:
            out = y[..., 1, :].copy()
            out[:, 1:] += y[:, :-1, :, :, 0, :]
            out[:, :-1] += y[:, 1:, :, :, 2, :]
        return out + self.bias

    def grads(self, x: np.ndarray, g: np.ndarray):
        p, cin, cout = self.weights.shape
        b, j, w, h, _ = x.shape
        z = np.ascontiguousarray(x).reshape(-1, cin)
        if p == 1:
            gall = g.reshape(-1, cout)
        else:
            buf = np.zeros((b, j, w, h, p, cout), dtype=g.dtype)
            buf[:, :-1, :, :, 0, :] = g[:, 1:]
            buf[..., 1, :] = g
            buf[:, 1:, :, :, 2, :] = g[:, :-1]
            gall = buf.reshape(-1, p * cout)
        wcat = self._wcat()
        dwcat = z.T @ gall  # (cin, p*cout)
        dw = dwcat.reshape(cin, p, cout).transpose(1, 0, 2)
        db = g.sum(axis=(0, 1, 2, 3))
        dx = (gall @ wcat.T).reshape(x.shape)
        return dw, db, dx

    @property
    def n_params(self) -> int:
        return self.weights.size + self.bias.size


@dataclass
class SliceMix:
    """Linear recombination across slices, shared over (w, h, ch)."""

    weights: np.ndarray  # (j_in, j_out)
    bias: np.ndarray  # (j_out,)

    def pre(self, x: np.ndarray) -> np.ndarray:
        out = np.tensordot(x, self.weights, axes=([1], [0]))  # (B,W,H,C,Jout)
        out = np.moveaxis(out, -1, 1)
        return out + self.bias[None, :, None, None, None]

    def grads(self, x: np.ndarray, g: np.ndarray):
        dw = np.tensordot(x, g, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        db = g.sum(axis=(0, 2, 3, 4))
        dx = np.moveaxis(np.tensordot(g, self.weights, axes=([1], [1])), -1, 1)
        return dw, db, dx

    @property
    def n_params(self) -> int:
        return self.weights.size + self.bias.size


@dataclass
class Dense:
    weights: np.ndarray  # (d_in, n_out)
    bias: np.ndarray  # (n_out,)

    @property
    def n_params(self) -> int:
        return self.weights.size + self.bias.size


def _glorot(stream: SplitMix64Stream, shape: tuple[int, ...], fan_in: int, fan_out: int):
    s = np.sqrt(6.0 / (fan_in + fan_out))
    u = stream.uniforms(int(np.prod(shape)))
    return ((2.0 * u - 1.0) * s).reshape(shape)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class Net1D:
    n_slices: int
    n_channels: int
    width: int
    height: int
    layers: list = field(default_factory=list)  # 7x ChannelConv/SliceMix
    head: Dense | None = None

    @property
    def parameter_count(self) -> int:
        return sum(l.n_params for l in self.layers) + self.head.n_params

    def hidden_shapes(self) -> list[tuple[int, ...]]:
        """Output shape of each hidden layer for one sample."""
        shapes = []
        j, c = self.n_slices, self.n_channels
        for layer in self.layers:
            if isinstance(layer, ChannelConv):
                c = layer.weights.shape[2]
            else:
                j = layer.weights.shape[1]
            shapes.append((j, self.width, self.height, c))
        return shapes

    def _check_input(self, x: np.ndarray) -> None:
        want = (self.n_slices, self.width, self.height, self.n_channels)
        if x.shape[1:] != want:
            raise DataError(f"input shape {x.shape[1:]} does not match net {want}")

    def forward_batch(self, x: np.ndarray, start: int = 0):
        """Run layers[start:] on ``x``; returns (probs (B,2), cache).

        cache[i] = (layer input, pre-activation) for hidden layers and
        (flattened input, probs) for the head.
        """
        if start == 0:
            self._check_input(x)
        a = x.astype(np.float64, copy=False)
        cache: list = [None] * start
        for layer in self.layers[start:]:
            pre = layer.pre(a)
            cache.append((a, pre))
            a = np.maximum(pre, 0.0)
        flat = a.reshape(a.shape[0], -1)
        logits = flat @ self.head.weights + self.head.bias
        probs = _softmax(logits)
        cache.append((flat, probs))
        return probs, cache

    def forward(self, x: np.ndarray):
        """Single sample (J, W, H, K) -> ((2,) probabilities, cache)."""
        probs, cache = self.forward_batch(x[None])
        return probs[0], cache

    def backward_batch(self, cache: list, labels: np.ndarray):
        """Mean-batch gradients of the cross-entropy loss.

        Returns [(dW, db), ...] aligned with layers + head last.
        """
        flat, probs = cache[-1]
        b = probs.shape[0]
        g_logit = probs.copy()
        g_logit[np.arange(b), labels] -= 1.0
        p_label = probs[np.arange(b), labels]
        live = (p_label > PROB_CLAMP) & (p_label < 1.0 - PROB_CLAMP)
        g_logit *= live[:, None] / b
        d_head = (flat.T @ g_logit, g_logit.sum(axis=0))
        g = (g_logit @ self.head.weights.T).reshape(
            (b,) + self.hidden_shapes()[-1]
        )
        grads: list = [None] * len(self.layers) + [d_head]
        for i in range(len(self.layers) - 1, -1, -1):
            a_in, pre = cache[i]
            g = g * (pre > 0.0)
            dw, db, g = self.layers[i].grads(a_in, g)
            grads[i] = (dw, db)
        return grads

    def backward(self, cache: list, label: int):
        return self.backward_batch(cache, np.array([label]))

    def apply_sgd(self, grads: list, lr: float) -> None:
        for layer, (dw, db) in zip(self.layers + [self.head], grads):
            layer.weights -= lr * dw
            layer.bias -= lr * db

    def loss_from(self, layer_index: int, a_in: np.ndarray, label: int) -> float:
        """Loss recomputed from ``layer_index`` onward; prefix activations
        are unaffected by parameters at or after that layer."""
        probs, _ = self.forward_batch(a_in[None], start=layer_index)
        return loss(probs[0], label)

    def param_layers(self) -> list:
        return self.layers + [self.head]


def slice_chain(n_slices: int) -> tuple[int, int, int, int]:
    """Successive floor-halvings of the slice count: J, J/2, J/4, J/8."""
    j = n_slices
    return (j, j // 2, j // 4, j // 8)


def parameter_count_for(
    n_slices: int, n_channels: int, width: int = 3, height: int = 3
) -> int:
    """Closed-form trainable parameter count of the (J, K) architecture."""
    j0, j1, j2, j3 = slice_chain(n_slices)
    conv_in = (n_channels, CHANNEL_WIDTHS[0], CHANNEL_WIDTHS[1], CHANNEL_WIDTHS[2])
    total = sum(
        CONV_KERNELS[i] * conv_in[i] * CHANNEL_WIDTHS[i] + CHANNEL_WIDTHS[i]
        for i in range(4)
    )
    total += sum(jin * jout + jout for jin, jout in ((j0, j1), (j1, j2), (j2, j3)))
    total += CHANNEL_WIDTHS[3] * width * height * j3 * 2 + 2
    return total


def build_net(n_slices: int, n_channels: int, seed: int, width: int = 3, height: int = 3) -> Net1D:
    """Construct the 8-layer network for (J, K) inputs, Glorot-initialized.

    Weights are drawn layer by layer (C1, S1, C2, S2, C3, S3, C4, FC),
    row-major within each layer, from one SplitMix64 stream; biases are
    zero. Deterministic in ``seed``.
    """
    if n_slices < 8:
        raise ConfigError(
            f"n_slices={n_slices} cannot survive three halvings (need >= 8)"
        )
    if n_channels < 1:
        raise ConfigError("n_channels must be >= 1")
    j0, j1, j2, j3 = slice_chain(n_slices)
    stream = SplitMix64Stream(splitmix64(seed))
    net = Net1D(n_slices=n_slices, n_channels=n_channels, width=width, height=height)

    conv_in = (n_channels, CHANNEL_WIDTHS[0], CHANNEL_WIDTHS[1], CHANNEL_WIDTHS[2])
    mix_dims = ((j0, j1), (j1, j2), (j2, j3))
    for i in range(4):
        p, cin, cout = CONV_KERNELS[i], conv_in[i], CHANNEL_WIDTHS[i]
        w = _glorot(stream, (p, cin, cout), fan_in=p * cin, fan_out=p * cout)
        net.layers.append(ChannelConv(weights=w, bias=np.zeros(cout)))
        if i < 3:
            jin, jout = mix_dims[i]
            w = _glorot(stream, (jin, jout), fan_in=jin, fan_out=jout)
            net.layers.append(SliceMix(weights=w, bias=np.zeros(jout)))
    d_in = CHANNEL_WIDTHS[3] * width * height * j3
    w = _glorot(stream, (d_in, 2), fan_in=d_in, fan_out=2)
    net.head = Dense(weights=w, bias=np.zeros(2))
    return net


class LinearHead:
    """Single fully-connected softmax classifier on flattened features.

    Drop-in replacement for Net1D when the 1D convolution stack is
    ablated; shares the training loop and the head update rule.
    """

    def __init__(self, n_slices: int, n_channels: int, width: int, height: int, seed: int):
        self.n_slices = n_slices
        self.n_channels = n_channels
        self.width = width
        self.height = height
        d_in = n_slices * width * height * n_channels
        stream = SplitMix64Stream(splitmix64(seed))
        self.head = Dense(
            weights=_glorot(stream, (d_in, 2), fan_in=d_in, fan_out=2),
            bias=np.zeros(2),
        )

    @property
    def parameter_count(self) -> int:
        return self.head.n_params

    def forward_batch(self, x: np.ndarray):
        flat = x.reshape(x.shape[0], -1).astype(np.float64, copy=False)
        probs = _softmax(flat @ self.head.weights + self.head.bias)
        return probs, [(flat, probs)]

    def backward_batch(self, cache: list, labels: np.ndarray):
        flat, probs = cache[-1]
        b = probs.shape[0]
        g = probs.copy()
        g[np.arange(b), labels] -= 1.0
        p_label = probs[np.arange(b), labels]
        live = (p_label > PROB_CLAMP) & (p_label < 1.0 - PROB_CLAMP)
        g *= live[:, None] / b
        return [(flat.T @ g, g.sum(axis=0))]

    def apply_sgd(self, grads: list, lr: float) -> None:
        (dw, db), = grads
        self.head.weights -= lr * dw
        self.head.bias -= lr * db

    def param_layers(self) -> list:
        return [self.head]


def loss(probs: np.ndarray, label: int) -> float:
    """Cross-entropy against a one-hot label over the 2 outputs."""
    p = float(np.clip(probs[label], PROB_CLAMP, 1.0 - PROB_CLAMP))
    return -float(np.log(p))


def batch_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    p = np.clip(probs[np.arange(len(labels)), labels], PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-np.log(p).mean())


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 8
    epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


def epoch_order(subject_ids: list[str], epoch_seed: int) -> list[int]:
    """Shuffle keyed by subject identity, so the batch composition of an
    epoch does not depend on the order the corpus was assembled in."""
    keys = [
        (splitmix64(epoch_seed ^ fnv1a64(sid)), sid) for sid in subject_ids
    ]
    return sorted(range(len(subject_ids)), key=lambda i: keys[i])


def train_branch(corpus: list[tuple[str, np.ndarray, int]], cfg: TrainConfig, model=None):
    """Train a branch classifier with plain SGD on mean-batch gradients.

    ``corpus`` is a list of (subject_id, features (J,W,H,K), label 0/1).
    Builds a Net1D from the corpus dims unless ``model`` is supplied.
    """
    if len(corpus) < 2:
        raise DataError("training corpus needs at least 2 subjects")
    labels = {label for _, _, label in corpus}
    if labels != {0, 1}:
        raise DataError(f"training corpus must contain both classes, got {labels}")

    ids = [sid for sid, _, _ in corpus]
    x = np.stack([feats for _, feats, _ in corpus]).astype(np.float64)
    y = np.array([label for _, _, label in corpus], dtype=np.intp)
    if model is None:
        j, w, h, k = x.shape[1:]
        model = build_net(j, k, seed=derive_seed(cfg.seed, 1, 0), width=w, height=h)

    for epoch in range(cfg.epochs):
        order = epoch_order(ids, derive_seed(cfg.seed, 0, epoch))
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            probs, cache = model.forward_batch(x[idx])
            grads = model.backward_batch(cache, y[idx])
            model.apply_sgd(grads, cfg.learning_rate)
    return model


def predict_positive(model, feats: np.ndarray) -> float:
    """Probability of the positive class for one subject's features."""
    probs, _ = model.forward_batch(feats[None].astype(np.float64))
    return float(probs[0, 1])


LAYER_NAMES = ("c1", "s1", "c2", "s2", "c3", "s3", "c4", "fc")


def save_net(net: Net1D, directory) -> None:
    """Write a net as one V21T file per parameter plus metadata JSON.

    Layout: <dir>/{c1,s1,...,fc}_{weights,bias}.v21t + net.json.
    """
    import json
    from pathlib import Path

    from .tensor import write_array

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, layer in zip(LAYER_NAMES, net.param_layers()):
        write_array(layer.weights, directory / f"{name}_weights.v21t")
        write_array(layer.bias, directory / f"{name}_bias.v21t")
    meta = {
        "n_slices": net.n_slices,
        "n_channels": net.n_channels,
        "width": net.width,
        "height": net.height,
        "hidden_shapes": [list(s) for s in net.hidden_shapes()],
        "parameter_count": net.parameter_count,
    }
    (directory / "net.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_net(directory) -> Net1D:
    """Inverse of save_net (weights round-trip through float32 storage)."""
    import json
    from pathlib import Path

    from .tensor import read_array

    directory = Path(directory)
    meta = json.loads((directory / "net.json").read_text())
    net = build_net(
        meta["n_slices"], meta["n_channels"], seed=0,
        width=meta["width"], height=meta["height"],
    )
    for name, layer in zip(LAYER_NAMES, net.param_layers()):
        layer.weights = read_array(directory / f"{name}_weights.v21t").astype(np.float64)
        layer.bias = read_array(directory / f"{name}_bias.v21t").astype(np.float64)
    return net


class StackedNets:
    """Several same-shaped Net1D branches trained in lockstep.

    Parameters carry a leading group axis; each step performs the same
    layer algebra as Net1D via batched matmul, so one interpreter pass
    drives the whole group. Branch independence is preserved: group
    member g has its own seed-derived weights and its own per-epoch
    subject order.

    Activation layout is (G, B, J, M, C) with M = width * height.
    Convolutions run on an im2col window buffer (rebuilt per batch,
    reused by the backward pass); ReLU is applied in place and the
    backward mask comes from the activations (act > 0 iff pre > 0).
    """

    def __init__(self, nets: list[Net1D], dtype=TRAIN_DTYPE):
        self.dtype = dtype
        ref = nets[0]
        self.n_slices = ref.n_slices
        self.n_channels = ref.n_channels
        self.m = ref.width * ref.height
        self.kinds = [
            "conv" if isinstance(l, ChannelConv) else "mix" for l in ref.layers
        ]
        self.conv_shapes = [
            l.weights.shape for l in ref.layers if isinstance(l, ChannelConv)
        ]
        self.params: list[tuple[np.ndarray, np.ndarray]] = []
        for li, layer in enumerate(ref.layers):
            ws = np.stack([n.layers[li].weights for n in nets]).astype(dtype)
            bs = np.stack([n.layers[li].bias for n in nets]).astype(dtype)
            if isinstance(layer, ChannelConv):
                p, cin, cout = layer.weights.shape
                ws = ws.reshape(len(nets), p * cin, cout)  # im2col weights
            self.params.append((ws, bs))
        self.head_w = np.stack([n.head.weights for n in nets]).astype(dtype)
        self.head_b = np.stack([n.head.bias for n in nets]).astype(dtype)
        self.g = len(nets)
        self._scratch: dict = {}

    def _buf(self, key, shape, dtype=None) -> np.ndarray:
        """Reusable scratch array; keyed per (role, shape) so a buffer is
        never shared between two live tensors of one step."""
        full_key = (key, shape)
        buf = self._scratch.get(full_key)
        if buf is None:
            buf = np.empty(shape, dtype=dtype or self.dtype)
            self._scratch[full_key] = buf
        return buf

    def export_into(self, nets: list[Net1D]) -> None:
        """Write trained group weights back into the per-branch nets."""
        conv_i = 0
        for li, kind in enumerate(self.kinds):
            ws, bs = self.params[li]
            if kind == "conv":
                p, cin, cout = self.conv_shapes[conv_i]
                conv_i += 1
                unpacked = ws.reshape(self.g, p, cin, cout)
            else:
                unpacked = ws
            for gi, net in enumerate(nets):
                net.layers[li].weights = unpacked[gi].astype(np.float64)
                net.layers[li].bias = bs[gi].astype(np.float64)
        for gi, net in enumerate(nets):
            net.head.weights = self.head_w[gi].astype(np.float64)
            net.head.bias = self.head_b[gi].astype(np.float64)

    def _windows(self, a: np.ndarray, p: int, li: int) -> np.ndarray:
        """im2col along the slice axis: (G,B,J,M,C) -> (G,B,J,M,P,C) with
        window[n, q] = a[n + q - 1] and zero padding at the ends."""
        gdim, b, j, m, c = a.shape
        buf = self._buf(("zwin", li), (gdim, b, j, m, p, c))
        buf[..., 1, :] = a
        buf[:, :, 1:, :, 0, :] = a[:, :, :-1]
        buf[:, :, 0, :, 0, :] = 0.0
        buf[:, :, :-1, :, 2, :] = a[:, :, 1:]
        buf[:, :, j - 1, :, 2, :] = 0.0
        return buf

    def _forward(self, x: np.ndarray):
        a = x
        cache = []
        conv_i = 0
        for li, kind in enumerate(self.kinds):
            ws, bs = self.params[li]
            if kind == "conv":
                p, cin, cout = self.conv_shapes[conv_i]
                conv_i += 1
                gdim, b, j, m, _ = a.shape
                zwin = a if p == 1 else self._windows(a, p, li)
                z2 = zwin.reshape(gdim, b * j * m, p * cin)
                out2 = self._buf(("act", li), (gdim, b * j * m, cout))
                np.matmul(z2, ws, out=out2)
                act = out2.reshape(gdim, b, j, m, cout)
                act += bs[:, None, None, None, :]
                np.maximum(act, 0.0, out=act)
                cache.append((zwin, act))
            else:
                gdim, b, jin, m, c = a.shape
                jout = ws.shape[2]
                at = self._buf(("at", li), (gdim, b, m, c, jin))
                np.copyto(at, a.transpose(0, 1, 3, 4, 2))
                pret = self._buf(("pret", li), (gdim, b * m * c, jout))
                np.matmul(at.reshape(gdim, b * m * c, jin), ws, out=pret)
                act = self._buf(("act", li), (gdim, b, jout, m, c))
                np.copyto(
                    act,
                    pret.reshape(gdim, b, m, c, jout).transpose(0, 1, 4, 2, 3),
                )
                act += bs[:, None, :, None, None]
                np.maximum(act, 0.0, out=act)
                cache.append((at, act))
            a = act
        gdim, b = a.shape[:2]
        flat = a.reshape(gdim, b, -1)
        logits = np.matmul(flat, self.head_w) + self.head_b[:, None, :]
        probs = _softmax(logits)
        cache.append((flat, probs))
        return probs, cache

    def _backward(self, cache, labels: np.ndarray):
        """labels: (G, B) per-branch batch labels. Returns grads list.

        Gradient buffers are scratch arrays owned by the instance; they
        are consumed by the SGD update within the same step.
        """
        flat, probs = cache[-1]
        gdim, b, _ = probs.shape
        g_logit = probs.copy()
        rows = np.arange(b)
        for gi in range(gdim):
            g_logit[gi, rows, labels[gi]] -= 1.0
            p_label = probs[gi, rows, labels[gi]]
            live = (p_label > PROB_CLAMP) & (p_label < 1.0 - PROB_CLAMP)
            g_logit[gi] *= (live / b)[:, None]
        d_head_w = np.matmul(flat.transpose(0, 2, 1), g_logit)
        d_head_b = g_logit.sum(axis=1)
        grad2 = self._buf(("ghead",), (gdim, b, self.head_w.shape[1]))
        np.matmul(g_logit, self.head_w.transpose(0, 2, 1), out=grad2)
        grad = grad2.reshape(cache[len(self.kinds) - 1][1].shape)
        grads: list = [None] * len(self.kinds)
        conv_i = len(self.conv_shapes)
        for li in range(len(self.kinds) - 1, -1, -1):
            ws, _ = self.params[li]
            kind = self.kinds[li]
            aux, act = cache[li]
            grad *= act > 0.0
            if kind == "conv":
                conv_i -= 1
                p, cin, cout = self.conv_shapes[conv_i]
                gdim, bdim, j, m, _ = grad.shape
                z2 = aux.reshape(self.g, bdim * j * m, p * cin)
                g2 = grad.reshape(self.g, bdim * j * m, cout)
                dw = np.matmul(z2.transpose(0, 2, 1), g2)
                db = grad.sum(axis=(1, 2, 3))
                dz2 = self._buf(("dzwin", li), (self.g, bdim * j * m, p * cin))
                np.matmul(g2, ws.transpose(0, 2, 1), out=dz2)
                if p == 1:
                    grad = dz2.reshape(self.g, bdim, j, m, cin)
                else:
                    dwin = dz2.reshape(self.g, bdim, j, m, p, cin)
                    gout = self._buf(("gout", li), (self.g, bdim, j, m, cin))
                    np.copyto(gout, dwin[..., 1, :])
                    gout[:, :, :-1] += dwin[:, :, 1:, :, 0, :]
                    gout[:, :, 1:] += dwin[:, :, :-1, :, 2, :]
                    grad = gout
            else:
                at = aux
                jin, jout = ws.shape[1], ws.shape[2]
                gdim, bdim, _, m, c = grad.shape
                gt = self._buf(("gt", li), (gdim, bdim, m, c, jout))
                np.copyto(gt, grad.transpose(0, 1, 3, 4, 2))
                gt2 = gt.reshape(self.g, bdim * m * c, jout)
                at2 = at.reshape(self.g, bdim * m * c, jin)
                dw = np.matmul(at2.transpose(0, 2, 1), gt2)
                db = grad.sum(axis=(1, 3, 4))
                dxt = self._buf(("dxt", li), (self.g, bdim * m * c, jin))
                np.matmul(gt2, ws.transpose(0, 2, 1), out=dxt)
                gout = self._buf(("gout", li), (self.g, bdim, jin, m, c))
                np.copyto(
                    gout,
                    dxt.reshape(self.g, bdim, m, c, jin).transpose(0, 1, 4, 2, 3),
                )
                grad = gout
            grads[li] = (dw, db)
        grads.append((d_head_w, d_head_b))
        return grads

    def sgd_step(self, x: np.ndarray, labels: np.ndarray, lr) -> None:
        probs, cache = self._forward(x)
        grads = self._backward(cache, labels)
        for (ws, bs), (dw, db) in zip(self.params, grads[:-1]):
            ws -= lr * dw
            bs -= lr * db
        self.head_w -= lr * grads[-1][0]
        self.head_b -= lr * grads[-1][1]

    def predict_positive(self, x: np.ndarray) -> np.ndarray:
        """x: (G, B, J, M, K) -> (G, B) positive-class probabilities."""
        probs, _ = self._forward(x.astype(self.dtype, copy=False))
        return probs[..., 1]


def train_branch_group(
    corpora: list[list[tuple[str, np.ndarray, int]]],
    cfgs: list[TrainConfig],
) -> list[Net1D]:
    """Train one Net1D per corpus simultaneously (all same dims).

    Semantically equivalent to calling train_branch per corpus: branch g
    uses cfgs[g].seed for both its weight init and its epoch shuffles.
    All corpora must contain the same subjects (orders may differ).
    """
    if len(corpora) != len(cfgs):
        raise DataError("one TrainConfig per corpus required")
    ref_cfg = cfgs[0]
    for cfg in cfgs:
        if (cfg.epochs, cfg.batch_size, cfg.learning_rate) != (
            ref_cfg.epochs,
            ref_cfg.batch_size,
            ref_cfg.learning_rate,
        ):
            raise DataError("group members must share epoch/batch/lr settings")
    nets = []
    xs = []
    ys = []
    ids_per_branch = []
    for corpus, cfg in zip(corpora, cfgs):
        if len(corpus) < 2 or {l for _, _, l in corpus} != {0, 1}:
            raise DataError("each corpus needs >= 2 subjects and both classes")
        ids = [sid for sid, _, _ in corpus]
        j, w, h, k = corpus[0][1].shape
        nets.append(build_net(j, k, seed=derive_seed(cfg.seed, 1, 0), width=w, height=h))
        xs.append(
            np.stack([f for _, f, _ in corpus])
            .astype(TRAIN_DTYPE)
            .reshape(len(corpus), j, w * h, k)
        )
        ys.append(np.array([l for _, _, l in corpus], dtype=np.intp))
        ids_per_branch.append(ids)

    stacked = StackedNets(nets)
    lr = np.asarray(ref_cfg.learning_rate, dtype=TRAIN_DTYPE)
    n = len(ids_per_branch[0])
    for epoch in range(ref_cfg.epochs):
        orders = [
            epoch_order(ids, derive_seed(cfg.seed, 0, epoch))
            for ids, cfg in zip(ids_per_branch, cfgs)
        ]
        for lo in range(0, n, ref_cfg.batch_size):
            hi = min(lo + ref_cfg.batch_size, n)
            xb = np.stack(
                [x[order[lo:hi]] for x, order in zip(xs, orders)]
            )
            yb = np.stack([y[order[lo:hi]] for y, order in zip(ys, orders)])
            stacked.sgd_step(xb, yb, lr)
    stacked.export_into(nets)
    return nets
