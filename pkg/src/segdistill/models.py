"""Segmentation model builders.

Three families share one :class:`Model` container:

* ``tnet``: symmetric encoder-decoder.  Each contraction block is
  conv(same) -> batchnorm -> relu -> 2x2 max pool with recorded indices; each
  expansion block unpools through the mirrored index map, then
  conv -> batchnorm -> relu (optional dropout).  A 1x1 linear classifier
  produces per-pixel logits.
* ``mini_fcn``: three conv-bn-relu-pool stages with 1x1 score heads at the
  two deepest resolutions, merged by bilinear upsampling.
* ``ensemble``: two frozen expert nets evaluated side by side; their softmax
  outputs are concatenated and refined by a trainable fusion head (conv stem
  plus residual blocks) into the dense label space.

Builders are deterministic given an :class:`~segdistill.rng.RngState`
(He-normal weights, zero biases, unit batchnorm).
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import NamedTuple

import numpy as np

from . import ops
from .autodiff import Tensor, stop_recording
from .errors import ConfigError, DimensionError
from .rng import RngState


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "tnet"
    num_blocks: int = 8          # total blocks; tnet splits them half/half
    feature_maps: int = 64
    kernel: int = 7
    num_classes: int = 11
    input_channels: int = 3
    dropout_p: float = 0.0
    dtype: str = "f32"
    class_space: str = "full"    # full | objects (catch-all channel 0)
    object_class_ids: tuple[int, ...] = field(default_factory=tuple)

    def validate(self) -> None:
        if self.kind not in ("tnet", "mini_fcn"):
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.kind == "tnet":
            if self.num_blocks < 2 or self.num_blocks % 2:
                raise ConfigError(f"tnet needs an even num_blocks >= 2, "
                                  f"got {self.num_blocks}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd and positive, got {self.kernel}")
        if self.feature_maps < 1:
            raise ConfigError("feature_maps must be positive")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if self.input_channels < 1:
            raise ConfigError("input_channels must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.dtype not in ("f32", "f64"):
            raise ConfigError(f"dtype must be f32|f64, got {self.dtype!r}")
        if self.class_space not in ("full", "objects"):
            raise ConfigError(f"class_space must be full|objects, got {self.class_space!r}")
        if self.class_space == "objects":
            if len(self.object_class_ids) != self.num_classes - 1:
                raise ConfigError("objects space needs one global id per "
                                  "non-catch-all channel")

    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64


@dataclass(frozen=True)
class EnsembleConfig:
    kind: str = "ensemble"
    fusion_maps: tuple[int, ...] = (128, 64, 64, 64)
    num_classes: int = 11
    dtype: str = "f32"
    dense: dict = field(default_factory=dict)   # serialized base ModelConfigs
    sparse: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.kind != "ensemble":
            raise ConfigError(f"unexpected kind {self.kind!r}")
        if not self.fusion_maps or any(m < 1 for m in self.fusion_maps):
            raise ConfigError("fusion_maps must be positive widths")
        if self.dtype not in ("f32", "f64"):
            raise ConfigError(f"dtype must be f32|f64, got {self.dtype!r}")

    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64


class LayerInfo(NamedTuple):
    name: str
    kind: str
    detail: str
    param_names: tuple[str, ...]


class Model:
    """Parameter container plus a forward pass chosen by config.kind."""

    def __init__(self, config, params: dict, buffers: dict, layers: list,
                 parts: dict | None = None):
        self.config = config
        self.params = params          # name -> Tensor
        self.buffers = buffers        # name -> ndarray (batchnorm running stats)
        self.layers = layers          # ordered LayerInfo entries
        self.parts = parts or {}      # sub-models (ensemble bases), share tensors

    # -- bookkeeping ---------------------------------------------------------

    def trainable(self) -> dict:
        return {n: p for n, p in self.params.items() if p.requires_grad}

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def summary(self) -> str:
        lines = [f"{self.config.kind} ({self.param_count()} parameters)"]
        for info in self.layers:
            count = sum(self.params[n].size for n in info.param_names)
            shapes = " ".join(str(tuple(self.params[n].shape))
                              for n in info.param_names if n.endswith(".w"))
            lines.append(f"  {info.name:<18} {info.kind:<10} {info.detail:<16} "
                         f"params={count:<9} {shapes}")
        return "\n".join(lines)

    def state_signature(self) -> bytes:
        """Concatenated little-endian parameter bytes; used for cache keys."""
        chunks = []
        for name in sorted(self.params):
            chunks.append(self.params[name].data.astype(self.params[name].dtype
                                                        .newbyteorder("<")).tobytes())
        return b"".join(chunks)

    # -- forward -------------------------------------------------------------

    def forward(self, x, mode: str = "train", rng: RngState | None = None,
                dropout_p: float | None = None, update_running: bool = True) -> Tensor:
        """Run the network on a (N, C, H, W) batch; returns per-pixel logits.

        ``rng`` seeds dropout masks (ignored in eval mode or when the model
        has no dropout).  ``dropout_p`` overrides the configured rate.
        ``update_running=False`` keeps batchnorm running buffers untouched,
        which line searches need when re-evaluating the same batch.
        """
        if mode not in ("train", "eval"):
            raise ConfigError(f"forward mode must be train|eval, got {mode!r}")
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x))
        if x.data.ndim != 4:
            raise DimensionError(f"forward expects (N, C, H, W), got {x.data.ndim}-d")
        kind = self.config.kind
        self._update_running = bool(update_running) and mode == "train"
        try:
            if kind == "tnet":
                return self._forward_tnet(x, mode, rng, dropout_p)
            if kind == "mini_fcn":
                return self._forward_mini_fcn(x, mode)
            if kind == "ensemble":
                return self._forward_ensemble(x, mode)
        finally:
            self._update_running = True
        raise ConfigError(f"unknown model kind {kind!r}")

    def _bn(self, prefix, h, mode):
        return ops.batchnorm2d(h, self.params[f"{prefix}.gamma"],
                               self.params[f"{prefix}.beta"],
                               self.buffers[f"{prefix}.mean"],
                               self.buffers[f"{prefix}.var"],
                               mode=mode, update_running=self._update_running)

    # set per forward call; line-search re-evaluations freeze running stats
    _update_running = True

    def _forward_tnet(self, x, mode, rng, dropout_p):
        cfg = self.config
        depth = cfg.num_blocks // 2
        n, c, h, w = x.shape
        if c != cfg.input_channels:
            raise DimensionError(f"input has {c} channels, model expects "
                                 f"{cfg.input_channels}")
        div = 2 ** depth
        if h % div or w % div:
            raise DimensionError(f"input {h}x{w} not divisible by {div}")
        p_drop = cfg.dropout_p if dropout_p is None else dropout_p
        gen = (rng or RngState(0)).generator() if (p_drop > 0 and mode == "train") else None

        indices = []
        sizes = []
        hcur = x
        for i in range(depth):
            hcur = ops.conv2d(hcur, self.params[f"enc{i}.conv.w"],
                              self.params[f"enc{i}.conv.b"], padding="same")
            hcur = ops.relu(self._bn(f"enc{i}.bn", hcur, mode))
            sizes.append(hcur.shape[2:])
            hcur, idx = ops.maxpool2_indices(hcur)
            indices.append(idx)
        for i in range(depth):
            mirror = depth - 1 - i
            hcur = ops.unpool2(hcur, indices[mirror], sizes[mirror])
            hcur = ops.conv2d(hcur, self.params[f"dec{i}.conv.w"],
                              self.params[f"dec{i}.conv.b"], padding="same")
            hcur = ops.relu(self._bn(f"dec{i}.bn", hcur, mode))
            if p_drop > 0:
                hcur = ops.dropout(hcur, p_drop, gen, mode)
        return ops.conv2d(hcur, self.params["head.w"], self.params["head.b"],
                          padding="same")

    def _forward_mini_fcn(self, x, mode):
        cfg = self.config
        n, c, h, w = x.shape
        if c != cfg.input_channels:
            raise DimensionError(f"input has {c} channels, model expects "
                                 f"{cfg.input_channels}")
        if h % 8 or w % 8:
            raise DimensionError(f"input {h}x{w} not divisible by 8")
        hcur = x
        taps = {}
        for i in range(3):
            hcur = ops.conv2d(hcur, self.params[f"stage{i}.conv.w"],
                              self.params[f"stage{i}.conv.b"], padding="same")
            hcur = ops.relu(self._bn(f"stage{i}.bn", hcur, mode))
            hcur, _ = ops.maxpool2_indices(hcur)
            taps[i] = hcur
        deep = ops.conv2d(taps[2], self.params["score_deep.w"],
                          self.params["score_deep.b"], padding="same")
        mid = ops.conv2d(taps[1], self.params["score_mid.w"],
                         self.params["score_mid.b"], padding="same")
        merged = ops.add(ops.bilinear_upsample(deep, 2), mid)
        return ops.bilinear_upsample(merged, 4)

    def _forward_ensemble(self, x, mode):
        return self._fusion(Tensor(self.base_probs(x)), mode)

    def base_probs(self, x) -> np.ndarray:
        """Concatenated class probabilities of the frozen experts.

        Always runs the bases in eval mode off the tape; the result can be
        fed to :meth:`fusion_forward` repeatedly (line-search trials re-score
        the fusion head only, the bases are deterministic per batch).
        """
        if self.config.kind != "ensemble":
            raise ConfigError("base_probs is only defined for ensembles")
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x))
        with stop_recording():
            pd = ops.softmax_channels(self.parts["dense"].forward(x, mode="eval"))
            ps = ops.softmax_channels(self.parts["sparse"].forward(x, mode="eval"))
        return np.concatenate([pd.data, ps.data], axis=1)

    def fusion_forward(self, probs, mode="train", update_running=True):
        """Score precomputed :meth:`base_probs` through the fusion head."""
        if self.config.kind != "ensemble":
            raise ConfigError("fusion_forward is only defined for ensembles")
        if mode not in ("train", "eval"):
            raise ConfigError(f"forward mode must be train|eval, got {mode!r}")
        if not isinstance(probs, Tensor):
            probs = Tensor(np.asarray(probs))
        self._update_running = bool(update_running) and mode == "train"
        try:
            return self._fusion(probs, mode)
        finally:
            self._update_running = True

    def _fusion(self, z, mode):
        z = ops.conv2d(z, self.params["fusion.stem.conv.w"],
                       self.params["fusion.stem.conv.b"], padding="same")
        z = ops.relu(self._bn("fusion.stem.bn", z, mode))
        for i in range(len(self.config.fusion_maps)):
            z = self._residual_block(f"fusion.res{i}", z, mode)
        return ops.conv2d(z, self.params["fusion.head.w"],
                          self.params["fusion.head.b"], padding="same")

    def _residual_block(self, prefix, z, mode):
        h = ops.conv2d(z, self.params[f"{prefix}.conv1.w"],
                       self.params[f"{prefix}.conv1.b"], padding="same")
        h = ops.relu(self._bn(f"{prefix}.bn1", h, mode))
        h = ops.conv2d(h, self.params[f"{prefix}.conv2.w"],
                       self.params[f"{prefix}.conv2.b"], padding="same")
        h = self._bn(f"{prefix}.bn2", h, mode)
        if f"{prefix}.proj.w" in self.params:
            skip = ops.conv2d(z, self.params[f"{prefix}.proj.w"],
                              self.params[f"{prefix}.proj.b"], padding="same")
        else:
            skip = z
        return ops.add(h, skip)   # no post-sum activation: zero convs = identity


# ---------------------------------------------------------------------------
# builders

def _he_conv(gen, cout, cin, k, dtype):
    std = np.sqrt(2.0 / (cin * k * k))
    w = gen.normal(0.0, std, size=(cout, cin, k, k)).astype(dtype)
    return Tensor(w, requires_grad=True), Tensor(np.zeros(cout, dtype=dtype),
                                                 requires_grad=True)


def _bn_params(c, dtype, params, buffers, prefix):
    params[f"{prefix}.gamma"] = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
    params[f"{prefix}.beta"] = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
    buffers[f"{prefix}.mean"] = np.zeros(c, dtype=dtype)
    buffers[f"{prefix}.var"] = np.ones(c, dtype=dtype)


def build_tnet(config: ModelConfig, rng: RngState | None = None) -> Model:
    """Build the encoder-decoder net; ``num_blocks`` splits half/half."""
    config.validate()
    if config.kind != "tnet":
        raise ConfigError(f"build_tnet got kind {config.kind!r}")
    gen = (rng or RngState(0)).generator()
    dtype = config.np_dtype()
    depth = config.num_blocks // 2
    fm, k = config.feature_maps, config.kernel
    params, buffers, layers = {}, {}, []

    cin = config.input_channels
    for i in range(depth):
        w, b = _he_conv(gen, fm, cin, k, dtype)
        params[f"enc{i}.conv.w"], params[f"enc{i}.conv.b"] = w, b
        _bn_params(fm, dtype, params, buffers, f"enc{i}.bn")
        layers.append(LayerInfo(f"enc{i}", "contract", f"{cin}->{fm} k{k} /2",
                                (f"enc{i}.conv.w", f"enc{i}.conv.b",
                                 f"enc{i}.bn.gamma", f"enc{i}.bn.beta")))
        cin = fm
    for i in range(depth):
        w, b = _he_conv(gen, fm, fm, k, dtype)
        params[f"dec{i}.conv.w"], params[f"dec{i}.conv.b"] = w, b
        _bn_params(fm, dtype, params, buffers, f"dec{i}.bn")
        layers.append(LayerInfo(f"dec{i}", "expand", f"{fm}->{fm} k{k} x2",
                                (f"dec{i}.conv.w", f"dec{i}.conv.b",
                                 f"dec{i}.bn.gamma", f"dec{i}.bn.beta")))
    w, b = _he_conv(gen, config.num_classes, fm, 1, dtype)
    params["head.w"], params["head.b"] = w, b
    layers.append(LayerInfo("head", "classify", f"{fm}->{config.num_classes} k1",
                            ("head.w", "head.b")))
    return Model(config, params, buffers, layers)


def build_mini_fcn(config: ModelConfig, rng: RngState | None = None) -> Model:
    """Build the three-stage fully convolutional baseline."""
    config.validate()
    if config.kind != "mini_fcn":
        raise ConfigError(f"build_mini_fcn got kind {config.kind!r}")
    gen = (rng or RngState(0)).generator()
    dtype = config.np_dtype()
    fm, k, ncls = config.feature_maps, config.kernel, config.num_classes
    widths = (fm, 2 * fm, 2 * fm)
    params, buffers, layers = {}, {}, []

    cin = config.input_channels
    for i, width in enumerate(widths):
        w, b = _he_conv(gen, width, cin, k, dtype)
        params[f"stage{i}.conv.w"], params[f"stage{i}.conv.b"] = w, b
        _bn_params(width, dtype, params, buffers, f"stage{i}.bn")
        layers.append(LayerInfo(f"stage{i}", "contract", f"{cin}->{width} k{k} /2",
                                (f"stage{i}.conv.w", f"stage{i}.conv.b",
                                 f"stage{i}.bn.gamma", f"stage{i}.bn.beta")))
        cin = width
    for name, src in (("score_deep", widths[2]), ("score_mid", widths[1])):
        w, b = _he_conv(gen, ncls, src, 1, dtype)
        params[f"{name}.w"], params[f"{name}.b"] = w, b
        layers.append(LayerInfo(name, "classify", f"{src}->{ncls} k1",
                                (f"{name}.w", f"{name}.b")))
    return Model(config, params, buffers, layers)


def build_model(config: ModelConfig, rng: RngState | None = None) -> Model:
    if config.kind == "tnet":
        return build_tnet(config, rng)
    if config.kind == "mini_fcn":
        return build_mini_fcn(config, rng)
    raise ConfigError(f"unknown model kind {config.kind!r}")


def build_ensemble(dense: Model, sparse: Model,
                   fusion_maps: tuple[int, ...] = (128, 64, 64, 64),
                   rng: RngState | None = None) -> Model:
    """Combine two trained experts under a trainable fusion head.

    The base models are frozen: their parameters are embedded (shared, not
    copied) with gradients disabled, and their forward passes always run in
    eval mode off the tape.  Output space is the dense expert's.
    """
    gen = (rng or RngState(0)).generator()
    config = EnsembleConfig(fusion_maps=tuple(int(m) for m in fusion_maps),
                            num_classes=dense.config.num_classes,
                            dtype=dense.config.dtype,
                            dense=asdict(dense.config),
                            sparse=asdict(sparse.config))
    config.validate()
    if dense.config.dtype != sparse.config.dtype:
        raise ConfigError("ensemble bases must share a dtype")
    dtype = config.np_dtype()
    params, buffers, layers = {}, {}, []
    for tag, base in (("dense", dense), ("sparse", sparse)):
        for n, p in base.params.items():
            p.requires_grad = False
            params[f"{tag}.{n}"] = p
        for n, buf in base.buffers.items():
            buffers[f"{tag}.{n}"] = buf
    layers.append(LayerInfo("bases", "frozen",
                            f"{dense.config.num_classes}+{sparse.config.num_classes} probs",
                            ()))

    cin = dense.config.num_classes + sparse.config.num_classes
    fm0 = config.fusion_maps[0]
    w, b = _he_conv(gen, fm0, cin, 3, dtype)
    params["fusion.stem.conv.w"], params["fusion.stem.conv.b"] = w, b
    _bn_params(fm0, dtype, params, buffers, "fusion.stem.bn")
    layers.append(LayerInfo("fusion.stem", "conv", f"{cin}->{fm0} k3",
                            ("fusion.stem.conv.w", "fusion.stem.conv.b",
                             "fusion.stem.bn.gamma", "fusion.stem.bn.beta")))
    cin = fm0
    for i, width in enumerate(config.fusion_maps):
        prefix = f"fusion.res{i}"
        w, b = _he_conv(gen, width, cin, 3, dtype)
        params[f"{prefix}.conv1.w"], params[f"{prefix}.conv1.b"] = w, b
        _bn_params(width, dtype, params, buffers, f"{prefix}.bn1")
        w, b = _he_conv(gen, width, width, 3, dtype)
        params[f"{prefix}.conv2.w"], params[f"{prefix}.conv2.b"] = w, b
        _bn_params(width, dtype, params, buffers, f"{prefix}.bn2")
        names = [f"{prefix}.conv1.w", f"{prefix}.conv1.b",
                 f"{prefix}.bn1.gamma", f"{prefix}.bn1.beta",
                 f"{prefix}.conv2.w", f"{prefix}.conv2.b",
                 f"{prefix}.bn2.gamma", f"{prefix}.bn2.beta"]
        if width != cin:
            w, b = _he_conv(gen, width, cin, 1, dtype)
            params[f"{prefix}.proj.w"], params[f"{prefix}.proj.b"] = w, b
            names += [f"{prefix}.proj.w", f"{prefix}.proj.b"]
        layers.append(LayerInfo(prefix, "residual", f"{cin}->{width} k3",
                                tuple(names)))
        cin = width
    w, b = _he_conv(gen, config.num_classes, cin, 1, dtype)
    params["fusion.head.w"], params["fusion.head.b"] = w, b
    layers.append(LayerInfo("fusion.head", "classify",
                            f"{cin}->{config.num_classes} k1",
                            ("fusion.head.w", "fusion.head.b")))
    return Model(config, params, buffers, layers,
                 parts={"dense": dense, "sparse": sparse})
