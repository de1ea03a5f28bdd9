"""Two-branch fully convolutional value network with dense Q-map output.

The state branch encodes the wrist-camera observation with a stride-2
stem and up to two pooling stages; the view branch encodes a candidate
action-view at full resolution. Features are concatenated where their
spatial dims meet and a residual head emits one Q value per view pixel.

Structure follows a two-branch residual design at reduced channel widths;
widths and the pooling count are configuration.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

from ..config import NetConfig
from .layers import BatchNorm2d, Conv2d, Identity, MaxPool2d, ReLU, ResBlock, Sequential

MAGIC = b"AVQ1"
FORMAT_VERSION = 1


class Network:
    def __init__(self, config: NetConfig | None = None, dtype=np.float32,
                 use_norm: bool = True, use_act: bool = True):
        self.config = config or NetConfig()
        self.dtype = dtype
        self.use_norm = use_norm
        self.use_act = use_act
        c = self.config
        rng = np.random.default_rng(c.seed)

        def norm(ch):
            return BatchNorm2d(ch, dtype=dtype) if use_norm else Identity()

        def act():
            return ReLU() if use_act else Identity()

        def rb(i, o):
            return ResBlock(i, o, rng=rng, dtype=dtype, use_norm=use_norm, use_act=use_act)

        w1, w2 = c.width1, c.width2
        state_layers = [Conv2d(c.in_channels, w1, 3, 2, 1, rng=rng, dtype=dtype), norm(w1), act(), rb(w1, w2)]
        if c.state_pools >= 1:
            state_layers.append(MaxPool2d())
        state_layers.append(rb(w2, w2))
        if c.state_pools >= 2:
            state_layers.append(MaxPool2d())
        state_layers.append(rb(w2, w2))
        self.state_encoder = Sequential(state_layers)

        self.view_encoder = Sequential([
            Conv2d(c.in_channels, w1, 3, 1, 1, rng=rng, dtype=dtype), norm(w1), act(),
            rb(w1, w2), rb(w2, w2), rb(w2, w2),
        ])

        self.head = Sequential([
            rb(2 * w2, w2), rb(w2, w2), rb(w2, w1),
            Conv2d(w1, 1, 1, 1, 0, rng=rng, dtype=dtype),
        ])
        # a gentle start: small Q everywhere instead of a random dense map
        final = self.head.layers[-1]
        final.weight *= 0.01

        self._modules = [self.state_encoder, self.view_encoder, self.head]
        self._concat_split = None

    # -- parameter plumbing ------------------------------------------------

    def parameters(self):
        out = []
        for m in self._modules:
            for layer in m.iter_layers():
                out.extend(layer.params)
        return out

    def gradients(self):
        out = []
        for m in self._modules:
            for layer in m.iter_layers():
                out.extend(layer.grads)
        return out

    def state_tensors(self):
        out = []
        for m in self._modules:
            for layer in m.iter_layers():
                out.extend(layer.state_arrays())
        return out

    def copy_from(self, other: "Network"):
        for dst, src in zip(self.parameters(), other.parameters()):
            dst[...] = src
        for dst, src in zip(self.state_tensors(), other.state_tensors()):
            dst[...] = src

    def clone(self) -> "Network":
        twin = Network(self.config, dtype=self.dtype, use_norm=self.use_norm, use_act=self.use_act)
        twin.copy_from(self)
        return twin

    # -- forward / backward -------------------------------------------------

    def _check_dims(self, state, view):
        red = self.config.state_reduction
        sh = (state.shape[-2] + red - 1) // red, (state.shape[-1] + red - 1) // red
        if sh != (view.shape[-2], view.shape[-1]):
            raise ValueError(
                f"state {state.shape[-2]}x{state.shape[-1]} reduces to {sh[0]}x{sh[1]}, "
                f"which does not match view {view.shape[-2]}x{view.shape[-1]}"
            )
        if state.shape[-3] != self.config.in_channels or view.shape[-3] != self.config.in_channels:
            raise ValueError("wrong channel count")

    @staticmethod
    def _to_nhwc(x, dtype):
        if x.ndim == 3:
            x = x[None]
        return np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=dtype)

    def forward(self, state: np.ndarray, view: np.ndarray, training: bool = False) -> np.ndarray:
        """Q-maps (B, 1, h, w) for paired (state, view) batches."""
        if state.ndim == 3:
            state = state[None]
        if view.ndim == 3:
            view = view[None]
        self._check_dims(state, view)
        fs = self.state_encoder.forward(self._to_nhwc(state, self.dtype), training)
        fv = self.view_encoder.forward(self._to_nhwc(view, self.dtype), training)
        x = np.concatenate([fs, fv], axis=-1)
        self._concat_split = fs.shape[-1]
        q = self.head.forward(x, training)
        return np.ascontiguousarray(q.transpose(0, 3, 1, 2))

    def backward(self, dq: np.ndarray):
        dx = self.head.backward(np.ascontiguousarray(dq.transpose(0, 2, 3, 1)))
        split = self._concat_split
        self.state_encoder.backward(np.ascontiguousarray(dx[..., :split]))
        self.view_encoder.backward(np.ascontiguousarray(dx[..., split:]))

    def score_views(self, state: np.ndarray, views: np.ndarray) -> np.ndarray:
        """View scores (max Q per view) for one state against many views."""
        if views.ndim == 3:
            views = views[None]
        self._check_dims(state[None] if state.ndim == 3 else state, views)
        fs = self.state_encoder.forward(self._to_nhwc(state, self.dtype), False)
        fv = self.view_encoder.forward(self._to_nhwc(views, self.dtype), False)
        fs = np.broadcast_to(fs, fv.shape[:3] + (fs.shape[-1],))
        x = np.concatenate([fs, fv], axis=-1)
        q = self.head.forward(x, False)
        return q.reshape(q.shape[0], -1).max(axis=1)

    def score_view_groups(self, states: np.ndarray, views: np.ndarray,
                          group: np.ndarray) -> np.ndarray:
        """Max view scores per group: views[i] pairs with states[group[i]].

        One batched pass for Q-learning targets over a whole replay batch.
        Returns (len(states),) with -inf for groups that own no views.
        """
        states = np.asarray(states)
        views = np.asarray(views)
        group = np.asarray(group)
        fs = self.state_encoder.forward(self._to_nhwc(states, self.dtype), False)
        fv = self.view_encoder.forward(self._to_nhwc(views, self.dtype), False)
        x = np.concatenate([fs[group], fv], axis=-1)
        q = self.head.forward(x, False)
        per_view = q.reshape(q.shape[0], -1).max(axis=1)
        out = np.full(len(states), -np.inf, dtype=np.float64)
        np.maximum.at(out, group, per_view)
        return out

    def qmap(self, state: np.ndarray, view: np.ndarray) -> np.ndarray:
        """Inference Q-map (h, w) for a single pair."""
        return self.forward(state, view, training=False)[0, 0]

    # -- training ------------------------------------------------------------

    def train_step(self, states, views, pixels, targets, optimizer):
        """One mean-|Q(pixel)-y| step. pixels (B,2) int; (-1,-1) selects the
        sample's current argmax pixel. Returns the scalar loss."""
        q = self.forward(states, views, training=True)
        b, _, h, w = q.shape
        pixels = np.asarray(pixels, dtype=np.int64)
        rows = pixels[:, 0].copy()
        cols = pixels[:, 1].copy()
        sentinel = rows < 0
        if np.any(sentinel):
            flat = q[sentinel, 0].reshape(sentinel.sum(), -1).argmax(axis=1)
            rows[sentinel] = flat // w
            cols[sentinel] = flat % w
        bi = np.arange(b)
        pred = q[bi, 0, rows, cols]
        targets = np.asarray(targets, dtype=q.dtype)
        diff = pred - targets
        loss = float(np.mean(np.abs(diff)))
        if not np.isfinite(loss):
            raise FloatingPointError("non-finite loss; aborting step")
        dq = np.zeros_like(q)
        dq[bi, 0, rows, cols] = np.sign(diff) / b
        self.backward(dq)
        optimizer.step(self.parameters(), self.gradients())
        return loss

    # -- persistence -----------------------------------------------------------

    def save(self, path):
        """Magic, version, config block, then parameter/state arrays as LE f32."""
        cfg = dict(self.config.to_dict(), use_norm=self.use_norm, use_act=self.use_act)
        blob = json.dumps(cfg, sort_keys=True).encode()
        arrays = self.parameters() + self.state_tensors()
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", FORMAT_VERSION))
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            f.write(struct.pack("<I", len(arrays)))
            for a in arrays:
                f.write(a.astype("<f4").tobytes())

    @staticmethod
    def load(path, dtype=np.float32) -> "Network":
        with open(path, "rb") as f:
            data = f.read()
        buf = io.BytesIO(data)
        if buf.read(4) != MAGIC:
            raise ValueError("not a network parameter file")
        (version,) = struct.unpack("<I", buf.read(4))
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported parameter format version {version}")
        (blen,) = struct.unpack("<I", buf.read(4))
        cfg = json.loads(buf.read(blen).decode())
        use_norm = cfg.pop("use_norm", True)
        use_act = cfg.pop("use_act", True)
        net = Network(NetConfig.from_dict(cfg), dtype=dtype, use_norm=use_norm, use_act=use_act)
        (count,) = struct.unpack("<I", buf.read(4))
        arrays = net.parameters() + net.state_tensors()
        if count != len(arrays):
            raise ValueError(f"architecture mismatch: file has {count} arrays, model needs {len(arrays)}")
        for a in arrays:
            raw = buf.read(4 * a.size)
            if len(raw) != 4 * a.size:
                raise ValueError("corrupt parameter file: truncated")
            a[...] = np.frombuffer(raw, dtype="<f4").reshape(a.shape).astype(a.dtype)
        if buf.read(1):
            raise ValueError("corrupt parameter file: trailing bytes")
        return net


class QFunction:
    """Adapter giving the policy loop its (state, views, candidates) scorer."""

    def __init__(self, net: Network):
        self.net = net

    def __call__(self, state_obs, view_tensors, candidates):
        return self.net.score_views(state_obs, view_tensors)
