"""Neural network layers with hand-written forward/backward passes.

Everything is plain numpy. Activations flow in NHWC layout (B, H, W, C):
convolutions gather k*k shifted blocks into an (N, k*k*C) matrix with
cheap sequential copies and hit BLAS as one tall GEMM, and their outputs
land contiguous with no transposition. The public network API still
speaks channels-first; the conversion happens once at its boundary.

Each layer keeps `params` / `grads` (aligned lists of arrays) and caches
what its backward pass needs. float32 by default, float64 for gradient
checking.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange


@njit(cache=True, parallel=True, fastmath=True)
def _conv3_fused_kernel(xp, wf, bias, scale, shift, relu, y, stride):
    """3x3 convolution with an optional affine+ReLU epilogue (inference).

    xp: padded (B,Hp,Wp,C); wf: (9*C, OC) taps flattened row-major;
    y: (B,OH,OW,OC). Reads x once, writes y once.
    """
    b, hp, wp, c = xp.shape
    _, oh, ow, oc = y.shape
    kc = 3 * c
    for p in prange(b * oh):
        bi = p // oh
        ho = p % oh
        hi = ho * stride
        acc = np.empty(oc, dtype=xp.dtype)
        row0 = xp[bi, hi].reshape(-1)
        row1 = xp[bi, hi + 1].reshape(-1)
        row2 = xp[bi, hi + 2].reshape(-1)
        for wo in range(ow):
            base = wo * stride * c
            for o in range(oc):
                acc[o] = bias[o]
            for j in range(kc):
                v0 = row0[base + j]
                v1 = row1[base + j]
                v2 = row2[base + j]
                wr0 = wf[j]
                wr1 = wf[kc + j]
                wr2 = wf[2 * kc + j]
                for o in range(oc):
                    acc[o] += v0 * wr0[o] + v1 * wr1[o] + v2 * wr2[o]
            out = y[bi, ho, wo]
            for o in range(oc):
                v = acc[o] * scale[o] + shift[o]
                if relu and v < 0.0:
                    v = 0.0
                out[o] = v


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    """(B,H,W,C) -> cols (B*OH*OW, k*k*C) and output spatial dims."""
    b, h, w, c = x.shape
    if pad > 0:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - k) // stride + 1
    ow = (wp - k) // stride + 1
    if k == 1 and stride == 1:
        return np.ascontiguousarray(x.reshape(-1, c)), oh, ow
    if stride == 1:
        # adjacent taps (kj, c) are contiguous inside a packed row, so the
        # whole matrix assembles from k big-chunk copies instead of k*k
        xf = x.reshape(b, hp, wp * c)
        win = np.lib.stride_tricks.sliding_window_view(xf, k * c, axis=2)[:, :, ::c]
        cols = np.empty((b, oh, ow, k, k * c), dtype=x.dtype)
        for ki in range(k):
            cols[:, :, :, ki, :] = win[:, ki:ki + oh]
        return cols.reshape(-1, k * k * c), oh, ow
    cols = np.empty((b, oh, ow, k * k * c), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            blk = x[:, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride, :]
            cols[..., (ki * k + kj) * c:(ki * k + kj + 1) * c] = blk
    return cols.reshape(-1, k * k * c), oh, ow


def _col2im(dcols: np.ndarray, x_shape, k: int, stride: int, pad: int) -> np.ndarray:
    """Scatter-add the im2col gradient back into (B,H,W,C) layout."""
    b, h, w, c = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - k) // stride + 1
    ow = (wp - k) // stride + 1
    if k == 1 and stride == 1 and pad == 0:
        return dcols.reshape(b, h, w, c)
    dcols = dcols.reshape(b, oh, ow, k * k * c)
    dx = np.zeros((b, hp, wp, c), dtype=dcols.dtype)
    for ki in range(k):
        for kj in range(k):
            dx[:, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride, :] += (
                dcols[..., (ki * k + kj) * c:(ki * k + kj + 1) * c]
            )
    if pad > 0:
        dx = dx[:, pad:hp - pad, pad:wp - pad, :]
    return dx


class Layer:
    params: list
    grads: list

    def __init__(self):
        self.params = []
        self.grads = []

    def state_arrays(self) -> list:
        """Non-trainable state persisted with the parameters (e.g. BN stats)."""
        return []

    def forward(self, x, training: bool):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError


class Conv2d(Layer):
    """Weights stored (out_c, in_c, k, k); activations NHWC."""

    def __init__(self, in_c, out_c, k=3, stride=1, pad=1, rng=None, dtype=np.float32):
        super().__init__()
        self.in_c, self.out_c, self.k, self.stride, self.pad = in_c, out_c, k, stride, pad
        rng = rng or np.random.default_rng(0)
        fan_in = in_c * k * k
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_c, in_c, k, k))
        self.weight = w.astype(dtype)
        self.bias = np.zeros(out_c, dtype=dtype)
        self.params = [self.weight, self.bias]
        self.grads = [np.zeros_like(self.weight), np.zeros_like(self.bias)]
        self._cache = None

    def _wmat(self):
        # (k*k*in_c, out_c), rows ordered to match im2col block order
        return np.ascontiguousarray(self.weight.transpose(2, 3, 1, 0).reshape(-1, self.out_c))

    def forward(self, x, training):
        if not training and self.k == 3:
            return self.forward_fused(x, None, None, relu=False)
        b = x.shape[0]
        cols, oh, ow = _im2col(x, self.k, self.stride, self.pad)
        y = cols @ self._wmat()
        y += self.bias
        if training:
            self._cache = (cols, x.shape)
        return y.reshape(b, oh, ow, self.out_c)

    def forward_fused(self, x, scale, shift, relu: bool):
        """Inference-only convolution with an affine(+ReLU) epilogue.

        Large tensors run a direct numba kernel (reads x once, writes y
        once); small ones go through im2col + BLAS, which wins below the
        kernel's launch-overhead floor.
        """
        b = x.shape[0]
        if scale is None:
            scale = np.ones(self.out_c, dtype=x.dtype)
            shift = np.zeros(self.out_c, dtype=x.dtype)
        if self.k == 3 and b * x.shape[1] * x.shape[2] >= 60_000:
            xp = np.pad(x, ((0, 0), (self.pad, self.pad), (self.pad, self.pad), (0, 0)))
            oh = (x.shape[1] + 2 * self.pad - self.k) // self.stride + 1
            ow = (x.shape[2] + 2 * self.pad - self.k) // self.stride + 1
            y = np.empty((b, oh, ow, self.out_c), dtype=x.dtype)
            _conv3_fused_kernel(
                np.ascontiguousarray(xp), self._wmat(),
                self.bias.astype(x.dtype, copy=False),
                np.asarray(scale, dtype=x.dtype), np.asarray(shift, dtype=x.dtype),
                relu, y, self.stride,
            )
            return y
        cols, oh, ow = _im2col(x, self.k, self.stride, self.pad)
        y = cols @ self._wmat()
        y += self.bias
        y *= scale
        y += shift
        if relu:
            np.maximum(y, 0.0, out=y)
        return y.reshape(b, oh, ow, self.out_c)

    def backward(self, dy):
        cols, x_shape = self._cache
        dym = dy.reshape(-1, self.out_c)
        dw = cols.T @ dym
        self.grads[0][...] = dw.reshape(self.k, self.k, self.in_c, self.out_c).transpose(3, 2, 0, 1)
        self.grads[1][...] = dym.sum(axis=0)
        dcols = dym @ self._wmat().T
        return _col2im(dcols, x_shape, self.k, self.stride, self.pad)


class BatchNorm2d(Layer):
    def __init__(self, c, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.c, self.momentum, self.eps = c, momentum, eps
        self.gamma = np.ones(c, dtype=dtype)
        self.beta = np.zeros(c, dtype=dtype)
        self.params = [self.gamma, self.beta]
        self.grads = [np.zeros_like(self.gamma), np.zeros_like(self.beta)]
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)
        self._cache = None

    def state_arrays(self):
        return [self.running_mean, self.running_var]

    def inference_affine(self):
        scale = self.gamma / np.sqrt(self.running_var + self.eps)
        return scale, self.beta - self.running_mean * scale

    def forward(self, x, training):
        if training:
            mean = x.mean(axis=(0, 1, 2))
            var = x.var(axis=(0, 1, 2))
            self.running_mean += self.momentum * (mean - self.running_mean)
            self.running_var += self.momentum * (var - self.running_var)
            invstd = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean) * invstd
            self._cache = (xhat, invstd)
            return self.gamma * xhat + self.beta
        scale = self.gamma / np.sqrt(self.running_var + self.eps)
        shift = self.beta - self.running_mean * scale
        y = x * scale
        y += shift
        return y

    def backward(self, dy):
        xhat, invstd = self._cache
        n = dy.shape[0] * dy.shape[1] * dy.shape[2]
        dgamma = np.einsum("bhwc,bhwc->c", dy, xhat)
        dbeta = dy.sum(axis=(0, 1, 2))
        self.grads[0][...] = dgamma
        self.grads[1][...] = dbeta
        coef = self.gamma * invstd / n
        dx = coef * (n * dy - dbeta - xhat * dgamma)
        return dx.astype(dy.dtype, copy=False)


class ReLU(Layer):
    def __init__(self):
        super().__init__()
        self._mask = None

    def forward(self, x, training):
        if training:
            self._mask = x > 0
            return np.where(self._mask, x, 0)
        return np.maximum(x, 0.0, out=x)  # inference tensors are ours to reuse

    def backward(self, dy):
        return np.where(self._mask, dy, 0)


class Identity(Layer):
    def forward(self, x, training):
        return x

    def backward(self, dy):
        return dy


class MaxPool2d(Layer):
    """kernel 3, stride 2, pad 1 (overlapping) pooling over NHWC."""

    def __init__(self, k=3, stride=2, pad=1):
        super().__init__()
        self.k, self.stride, self.pad = k, stride, pad
        self._cache = None

    def forward(self, x, training):
        neg = np.finfo(x.dtype).min
        xp = np.pad(x, ((0, 0), (self.pad, self.pad), (self.pad, self.pad), (0, 0)),
                    constant_values=neg)
        win = np.lib.stride_tricks.sliding_window_view(xp, (self.k, self.k), axis=(1, 2))
        win = win[:, ::self.stride, ::self.stride]        # (B, OH, OW, C, k, k)
        b, oh, ow, c, _, _ = win.shape
        flat = win.reshape(b, oh, ow, c, -1)
        arg = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        if training:
            self._cache = (arg, x.shape, xp.shape)
        return np.ascontiguousarray(y)

    def backward(self, dy):
        arg, x_shape, xp_shape = self._cache
        b, oh, ow, c = dy.shape
        ki = arg // self.k
        kj = arg % self.k
        rows = (np.arange(oh) * self.stride)[None, :, None, None] + ki
        colz = (np.arange(ow) * self.stride)[None, None, :, None] + kj
        dxp = np.zeros(xp_shape, dtype=dy.dtype)
        bi = np.arange(b)[:, None, None, None]
        ci = np.arange(c)[None, None, None, :]
        np.add.at(dxp, (bi, rows, colz, ci), dy)
        if self.pad > 0:
            dxp = dxp[:, self.pad:-self.pad, self.pad:-self.pad, :]
        return dxp


class Sequential(Layer):
    def __init__(self, layers):
        super().__init__()
        self.layers = layers

    def forward(self, x, training):
        if not training:
            return self._forward_fused(x)
        for l in self.layers:
            x = l.forward(x, training)
        return x

    def _forward_fused(self, x):
        # fold conv -> norm -> relu chains into single fused kernels
        i = 0
        n = len(self.layers)
        while i < n:
            l = self.layers[i]
            if isinstance(l, Conv2d) and i + 1 < n and isinstance(self.layers[i + 1], BatchNorm2d):
                scale, shift = self.layers[i + 1].inference_affine()
                relu = i + 2 < n and isinstance(self.layers[i + 2], ReLU)
                x = l.forward_fused(x, scale.astype(x.dtype), shift.astype(x.dtype), relu)
                i += 3 if relu else 2
            else:
                x = l.forward(x, False)
                i += 1
        return x

    def backward(self, dy):
        for l in reversed(self.layers):
            dy = l.backward(dy)
        return dy

    def iter_layers(self):
        for l in self.layers:
            if isinstance(l, (Sequential, ResBlock)):
                yield from l.iter_layers()
            else:
                yield l


class ResBlock(Layer):
    """conv-norm-act-conv-norm with a (projected) skip, then activation."""

    def __init__(self, in_c, out_c, rng=None, dtype=np.float32, use_norm=True, use_act=True):
        super().__init__()

        def norm():
            return BatchNorm2d(out_c, dtype=dtype) if use_norm else Identity()

        def act():
            return ReLU() if use_act else Identity()

        self.conv1 = Conv2d(in_c, out_c, 3, 1, 1, rng=rng, dtype=dtype)
        self.bn1 = norm()
        self.act1 = act()
        self.conv2 = Conv2d(out_c, out_c, 3, 1, 1, rng=rng, dtype=dtype)
        self.bn2 = norm()
        if in_c != out_c:
            self.skip_conv = Conv2d(in_c, out_c, 1, 1, 0, rng=rng, dtype=dtype)
            self.skip_bn = norm()
        else:
            self.skip_conv = None
            self.skip_bn = None
        self.act_out = act()

    def iter_layers(self):
        yield self.conv1
        yield self.bn1
        yield self.conv2
        yield self.bn2
        if self.skip_conv is not None:
            yield self.skip_conv
            yield self.skip_bn

    def forward(self, x, training):
        if not training and isinstance(self.bn1, BatchNorm2d):
            s1, t1 = self.bn1.inference_affine()
            main = self.conv1.forward_fused(x, s1.astype(x.dtype), t1.astype(x.dtype),
                                            isinstance(self.act1, ReLU))
            s2, t2 = self.bn2.inference_affine()
            main = self.conv2.forward_fused(main, s2.astype(x.dtype), t2.astype(x.dtype), False)
            if self.skip_conv is not None:
                ss, ts = self.skip_bn.inference_affine()
                skip = self.skip_conv.forward_fused(x, ss.astype(x.dtype), ts.astype(x.dtype), False)
            else:
                skip = x
            main += skip
            if isinstance(self.act_out, ReLU):
                np.maximum(main, 0.0, out=main)
            return main
        main = self.bn2.forward(
            self.conv2.forward(
                self.act1.forward(self.bn1.forward(self.conv1.forward(x, training), training), training),
                training,
            ),
            training,
        )
        skip = x
        if self.skip_conv is not None:
            skip = self.skip_bn.forward(self.skip_conv.forward(x, training), training)
        main += skip
        return self.act_out.forward(main, training)

    def backward(self, dy):
        dy = self.act_out.backward(dy)
        dmain = self.bn2.backward(dy)
        dmain = self.conv2.backward(dmain)
        dmain = self.act1.backward(dmain)
        dmain = self.bn1.backward(dmain)
        dmain = self.conv1.backward(dmain)
        if self.skip_conv is not None:
            dskip = self.skip_bn.backward(dy)
            dskip = self.skip_conv.backward(dskip)
        else:
            dskip = dy
        return dmain + dskip
