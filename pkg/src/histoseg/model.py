"""Class-conditioned segmentation model assembled from the autograd kernels.

An image is split into a patch grid and embedded by a small transformer
encoder; the class prompt is embedded through a frozen hashed token table
and a trainable projection; an optional box prompt is encoded into two
frozen corner tokens (random Fourier features of the normalized corner
coordinates plus a corner-type vector). Fusion runs in two residual
cross-attention stages (visual tokens attend to text, then to the box
tokens when present), followed by a stack of transformer encoder layers.
The decoder upsamples the fused grid through four Conv-BN-ReLU + bilinear
stages to two logits per pixel (background/foreground). Two direct
pathways bypass the trunk and feed the logits: a visual-text cosine
similarity skip (the from-scratch substitute for a pretrained
vision-language alignment) and, when a box prompt is given, learned
inside/outside-box offsets that make the spatial prior effective.

Training is class-conditioned: each sample is (image, binary class mask,
class prompt); the box prompt is the tight box of the ground-truth mask
and is randomly dropped so inference works without boxes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .corpus import Triplet, prompt_text
from .errors import ConfigError, InputError, TrainingError
from .imaging import BBox, binary_view, load_image, load_mask, sample_and_resize, tight_bbox


@dataclass
class ModelConfig:
    image_size: int = 224
    patch_size: int = 32
    dim: int = 512
    text_len: int = 77
    fusion_depth: int = 4
    encoder_depth: int = 2
    ffn_multiplier: int = 2
    box_dropout: float = 0.5
    box_jitter: float = 0.0  # max fractional side jitter for training boxes
    vocab_size: int = 4096
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError("image size must be divisible by patch size")
        if self.patch_size % 8:
            raise ConfigError("patch size must be a multiple of 8")
        if self.dim % 2 or self.dim < 16:
            raise ConfigError("embedding dim must be even and >= 16")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def decoder_channels(self) -> list[int]:
        d = self.dim
        return [d, max(d // 2, 1), max(d // 4, 1), max(d // 8, 1), max(d // 16, 1)]

    @property
    def decoder_factors(self) -> list[int]:
        return [2, 2, 2, self.patch_size // 8]


@dataclass
class ModelParams:
    """Trainable tensors plus frozen buffers (token table, box features)."""

    config: ModelConfig
    patch_embed_w: ag.Tensor
    patch_embed_b: ag.Tensor
    pos: ag.Tensor
    encoder_layers: list[ag.TransformerLayerParams]
    w_proj: ag.Tensor
    w_text: ag.Tensor
    w_sim: ag.Tensor
    sim_out: ag.Tensor
    box_in: ag.Tensor
    box_out: ag.Tensor
    fusion_layers: list[ag.TransformerLayerParams]
    decoder_stages: list[ag.ConvBnParams]
    out_w: ag.Tensor
    out_b: ag.Tensor
    token_table: np.ndarray = field(repr=False, default=None)
    box_rff: np.ndarray = field(repr=False, default=None)
    box_corner: np.ndarray = field(repr=False, default=None)
    _text_rows: dict = field(repr=False, default_factory=dict)  # prompt -> frozen rows

    def named_parameters(self) -> dict[str, ag.Tensor]:
        named = {
            "patch_embed.w": self.patch_embed_w,
            "patch_embed.b": self.patch_embed_b,
            "pos": self.pos,
            "w_proj": self.w_proj,
            "w_text": self.w_text,
            "w_sim": self.w_sim,
            "sim_out": self.sim_out,
            "box_in": self.box_in,
            "box_out": self.box_out,
            "out.w": self.out_w,
            "out.b": self.out_b,
        }
        for i, layer in enumerate(self.encoder_layers):
            for k, t in layer.tensors().items():
                named[f"enc.{i}.{k}"] = t
        for i, layer in enumerate(self.fusion_layers):
            for k, t in layer.tensors().items():
                named[f"fuse.{i}.{k}"] = t
        for i, stage in enumerate(self.decoder_stages):
            for k, t in stage.tensors().items():
                named[f"dec.{i}.{k}"] = t
        return named

    def frozen_arrays(self) -> dict[str, np.ndarray]:
        return {"token_table": self.token_table, "box_rff": self.box_rff,
                "box_corner": self.box_corner}

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, stage in enumerate(self.decoder_stages):
            out[f"dec.{i}.bn.running_mean"] = stage.bn.running_mean
            out[f"dec.{i}.bn.running_var"] = stage.bn.running_var
        return out

    def parameter_count(self) -> int:
        return sum(t.size for t in self.named_parameters().values())


def init_params(config: ModelConfig) -> ModelParams:
    rng = np.random.default_rng(config.seed)
    d = config.dim
    patch_dim = 3 * config.patch_size ** 2
    logger = logging.getLogger(__name__)

    def lin(n_in, n_out, std=None):
        s = std if std is not None else math.sqrt(2.0 / (n_in + n_out))
        return ag.Tensor(rng.normal(0.0, s, size=(n_in, n_out)), requires_grad=True)

    params = ModelParams(
        config=config,
        patch_embed_w=lin(patch_dim, d),
        patch_embed_b=ag.Tensor(np.zeros(d), requires_grad=True),
        pos=ag.Tensor(rng.normal(0.0, 0.02, size=(config.n_patches, d)), requires_grad=True),
        encoder_layers=[ag.init_transformer_layer(d, config.ffn_multiplier * d, rng)
                        for _ in range(config.encoder_depth)],
        w_proj=lin(d, d),
        w_text=lin(d, d),
        w_sim=lin(patch_dim, d),
        # nonzero init so the alignment matrices receive gradient from step 0
        sim_out=ag.Tensor(np.array([-1.0, 1.0]).reshape(2, 1, 1), requires_grad=True),
        box_in=ag.Tensor(np.zeros((2, 1, 1)), requires_grad=True),
        box_out=ag.Tensor(np.zeros((2, 1, 1)), requires_grad=True),
        fusion_layers=[ag.init_transformer_layer(d, config.ffn_multiplier * d, rng)
                       for _ in range(config.fusion_depth)],
        decoder_stages=[ag.init_conv_bn(c_in, c_out, rng) for c_in, c_out in
                        zip(config.decoder_channels[:-1], config.decoder_channels[1:])],
        out_w=ag.Tensor(rng.normal(0.0, 0.01, size=(2, config.decoder_channels[-1])),
                        requires_grad=True),
        out_b=ag.Tensor(np.zeros(2), requires_grad=True),
        token_table=rng.normal(0.0, 1.0, size=(config.vocab_size, d)),
        box_rff=rng.normal(0.0, 1.0, size=(d // 2, 2)),
        box_corner=rng.normal(0.0, 1.0, size=(2, d)),
    )
    logger.info("initialized model: %d trainable parameters", params.parameter_count())
    return params


def hash_token(token: str, vocab_size: int) -> int:
    """Stable token id in 1..vocab_size-1 (0 is the pad row)."""
    digest = hashlib.sha1(token.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % (vocab_size - 1) + 1


def check_vocab_collisions(names: list[str], vocab_size: int) -> list[tuple[str, str]]:
    """Pairs of distinct class names whose hashed token ids collide."""
    seen: dict[int, str] = {}
    collisions = []
    for name in names:
        for token in name.split():
            h = hash_token(token, vocab_size)
            if h in seen and seen[h] != token:
                collisions.append((seen[h], token))
            seen[h] = token
    return collisions


def _to_chw01(image) -> np.ndarray:
    """Accept HxWx3 uint8/float or 3xHxW float; return 3xHxW float64 in [0,1]."""
    arr = np.asarray(image)
    if arr.ndim != 3:
        raise InputError(f"expected a 3-channel image, got shape {arr.shape}")
    if arr.shape[-1] == 3 and arr.shape[0] != 3:
        arr = arr.transpose(2, 0, 1)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    return arr.astype(np.float64)


def encode_image(image, params: ModelParams, training: bool = False) -> ag.Tensor:
    """Patch embedding + positions -> transformer stack -> shared projection."""
    cfg = params.config
    x = image if isinstance(image, ag.Tensor) else ag.Tensor(_to_chw01(image))
    if x.shape != (3, cfg.image_size, cfg.image_size):
        raise ConfigError(f"image shape {x.shape} does not match configured size "
                          f"(3, {cfg.image_size}, {cfg.image_size})")
    v = ag.add(ag.add(ag.matmul(ag.patchify(x, cfg.patch_size), params.patch_embed_w),
                      params.patch_embed_b), params.pos)
    for layer in params.encoder_layers:
        v = ag.transformer_encoder_layer(v, layer)
    return ag.matmul(v, params.w_proj)


def encode_text(prompt: str, params: ModelParams) -> ag.Tensor:
    """Whitespace tokens -> frozen hashed embedding rows -> trainable projection.

    The sequence is truncated/padded to the configured length. Pad slots
    repeat the last real token: a dedicated pad row would hold most of the
    attention mass and carry no class information.
    """
    cfg = params.config
    rows = params._text_rows.get(prompt)
    if rows is None:
        tokens = prompt.split()
        if not tokens:
            raise InputError("prompt is empty after tokenization")
        ids = [hash_token(t, cfg.vocab_size) for t in tokens][:cfg.text_len]
        ids += [ids[-1]] * (cfg.text_len - len(ids))  # pad by repeating the last token
        rows = params.token_table[ids]
        params._text_rows[prompt] = rows
    return ag.matmul(ag.Tensor(rows), params.w_text)


def encode_box(box: BBox, params: ModelParams) -> ag.Tensor:
    """Two frozen corner tokens: random Fourier features + corner-type vector."""
    cfg = params.config
    corners = box.normalized(cfg.image_size, cfg.image_size)
    if min(corners) < 0.0 or max(corners) > 1.0:
        warnings.warn("box outside image bounds; clamping to [0, 1]")
        corners = tuple(min(max(c, 0.0), 1.0) for c in corners)
    x0, y0, x1, y1 = corners
    tokens = np.empty((2, cfg.dim))
    for k, (cx, cy) in enumerate(((x0, y0), (x1, y1))):
        z = 2.0 * math.pi * (params.box_rff @ np.array([cx, cy]))
        tokens[k] = np.concatenate([np.sin(z), np.cos(z)]) + params.box_corner[k]
    return ag.Tensor(tokens)


def fuse(v: ag.Tensor, text: ag.Tensor, box_tokens: ag.Tensor | None,
         params: ModelParams) -> ag.Tensor:
    """Two-stage cross-attention then transformer refinement; d x g x g output.

    Each stage is a residual read: the query stream passes through and the
    attention output is added onto it. A pure read (no residual) confines
    every token to the convex hull of the key/value rows, which erases the
    visual detail the decoder needs; with two box tokens it would collapse
    each patch to a single scalar degree of freedom.

    The text stage also adds a similarity modulation: each visual token's
    alignment with the mean text embedding scales a learned direction.
    Trained from scratch there is no pretrained vision-language alignment
    to seed attention, and without a multiplicative visual-text coupling
    the class prompt has no first-order influence on the decoded mask (the
    decoder's batchnorm cancels spatially uniform shifts).
    """
    cfg = params.config
    f = ag.add(v, ag.cross_attention(v, text, text))
    if box_tokens is not None:
        f = ag.add(f, ag.cross_attention(f, box_tokens, box_tokens))
    for layer in params.fusion_layers:
        f = ag.transformer_encoder_layer(f, layer)
    g = cfg.grid
    return ag.reshape(ag.transpose(f), (cfg.dim, g, g))


def text_similarity(patches: ag.Tensor, text: ag.Tensor, params: "ModelParams") -> ag.Tensor:
    """Cosine similarity between projected raw patches and the text embedding.

    The projection reads the raw patch pixels rather than the encoder
    output: the trunk, trained for class-agnostic localization, is free to
    discard hue, and an alignment head downstream of it then has no class
    signal left to latch onto. Cosine rather than a raw dot product: the
    optimizer can silence a dot product by shrinking the text magnitude,
    which kills the class signal before alignment has a chance to form.
    """
    vp = ag.matmul(patches, params.w_sim)
    t_mean = ag.tmean(text, axis=0, keepdims=True)
    dot = ag.matmul(vp, ag.transpose(t_mean))
    v_norm = ag.sqrt(ag.tsum(ag.mul(vp, vp), axis=1, keepdims=True))
    t_norm = ag.sqrt(ag.tsum(ag.mul(t_mean, t_mean), axis=1, keepdims=True))
    return ag.div(dot, ag.add(ag.mul(v_norm, t_norm), ag.Tensor(np.array([[1e-12]]))))


def decode(f_final: ag.Tensor, params: ModelParams, training: bool = False,
           stage_trace: list | None = None) -> ag.Tensor:
    """Four Conv-BN-ReLU + bilinear-upsampling stages, then a 1x1 conv to 2 logits."""
    cfg = params.config
    h = f_final
    if stage_trace is not None:
        stage_trace.append(h.shape)
    for stage, factor in zip(params.decoder_stages, cfg.decoder_factors):
        h = ag.bilinear_upsample(ag.conv3x3_bn_relu(h, stage, training), factor)
        if stage_trace is not None:
            stage_trace.append(h.shape)
    c, hh, ww = h.shape
    flat = ag.reshape(h, (c, hh * ww))
    logits = ag.add(ag.matmul(params.out_w, flat), ag.reshape(params.out_b, (2, 1)))
    return ag.reshape(logits, (2, hh, ww))


def forward(image, prompt: str, box: BBox | None, params: ModelParams,
            training: bool = False) -> ag.Tensor:
    """Full pass: encode image/text(/box), fuse, decode to 2 x S x S logits.

    The decoder output is summed with two direct pathways:

    - a class-similarity skip: the per-patch visual-text alignment map,
      bilinearly upsampled to full resolution and scaled by two learned
      logit weights. This keeps the class prompt wired to the loss at
      first order; routed only through the fusion trunk it gets attenuated
      as noise before text conditioning can pay off.
    - a box-prior bias when a box prompt is given: learned inside-box and
      outside-box logit offsets. Trained with tight ground-truth boxes the
      outside offset converges to a strong background prior, which is what
      makes box prompts worth supplying at inference.
    """
    cfg = params.config
    x = image if isinstance(image, ag.Tensor) else ag.Tensor(_to_chw01(image))
    v = encode_image(x, params, training)
    text = encode_text(prompt, params)
    box_tokens = encode_box(box, params) if box is not None else None
    logits = decode(fuse(v, text, box_tokens, params), params, training)
    sim = text_similarity(ag.patchify(x, cfg.patch_size), text, params)
    sim_map = ag.reshape(ag.transpose(sim), (1, cfg.grid, cfg.grid))
    logits = ag.add(logits, ag.mul(ag.bilinear_upsample(sim_map, cfg.patch_size),
                                   params.sim_out))
    if box is not None:
        size = cfg.image_size
        inside = np.zeros((1, size, size))
        bx = box.normalized(size, size)
        x0, y0 = int(round(bx[0] * size)), int(round(bx[1] * size))
        x1, y1 = int(round(bx[2] * size)), int(round(bx[3] * size))
        inside[0, max(y0, 0):min(y1, size), max(x0, 0):min(x1, size)] = 1.0
        prior = ag.add(ag.mul(ag.Tensor(inside), params.box_in),
                       ag.mul(ag.Tensor(1.0 - inside), params.box_out))
        logits = ag.add(logits, prior)
    return logits


def foreground_probability(image, prompt: str, box: BBox | None,
                           params: ModelParams) -> np.ndarray:
    logits = forward(image, prompt, box, params, training=False).data
    shifted = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e[1] / e.sum(axis=0)


def segment_multiclass(image, classes: list[tuple[int, str]],
                       boxes: dict[int, BBox] | None,
                       params: ModelParams) -> np.ndarray:
    """One class-conditioned forward per class, then per-pixel argmax.

    A pixel is background when every class foreground probability is below
    0.5; probability ties resolve to the lowest class index.
    """
    if not classes:
        raise InputError("need at least one class")
    ordered = sorted(classes)
    prob = np.stack([
        foreground_probability(image, prompt_text(name),
                               boxes.get(idx) if boxes else None, params)
        for idx, name in ordered])
    best = prob.argmax(axis=0)
    labels = np.array([idx for idx, _ in ordered], dtype=np.uint8)
    out = labels[best]
    out[prob.max(axis=0) < 0.5] = 0
    return out


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainSettings:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 5e-5
    lr_decay: float = 1.0  # per-epoch multiplicative factor
    weight_decay: float = 0.01
    seed: int = 0
    crop: int = 512
    # probability of a color-shift augmentation; augmented samples always keep
    # their box prompt, teaching the model to lean on the spatial prior when
    # the stain palette is unreliable
    color_aug: float = 0.0


@dataclass
class TrainSample:
    """One in-memory training unit: image, binary class mask, prompt text."""

    image: np.ndarray  # HxWx3 uint8
    label: np.ndarray  # HxW in {0,1}
    prompt: str


class TripletDataset:
    """Lazy manifest loader with a uint8 cache keyed by path."""

    def __init__(self, manifest: list[Triplet]):
        self.manifest = manifest
        self._images: dict[str, np.ndarray] = {}
        self._masks: dict[str, np.ndarray] = {}

    def __len__(self):
        return len(self.manifest)

    def sample(self, i: int) -> TrainSample:
        t = self.manifest[i]
        if t.image_path not in self._images:
            self._images[t.image_path] = load_image(t.image_path)
            self._masks[t.mask_path] = load_mask(t.mask_path)
        image = self._images[t.image_path]
        mask = self._masks[t.mask_path]
        return TrainSample(image=image, label=binary_view(mask, t.class_index),
                           prompt=prompt_text(t.class_name))


def _shift_colors(image: np.ndarray, strength: float) -> np.ndarray:
    """Mix each channel with the next one (same transform as shifted stains)."""
    img = image.astype(np.float64)
    mixed = (1.0 - strength) * img + strength * np.roll(img, 1, axis=2)
    return np.clip(np.rint(mixed), 0, 255).astype(np.uint8)


def _jitter_box(box: BBox, frac: float, size: int, rng: np.random.Generator) -> BBox:
    w = box.x_max - box.x_min + 1
    h = box.y_max - box.y_min + 1
    dx0, dx1 = rng.uniform(-frac, frac, 2) * w
    dy0, dy1 = rng.uniform(-frac, frac, 2) * h
    x0 = int(min(max(box.x_min + dx0, 0), size - 1))
    y0 = int(min(max(box.y_min + dy0, 0), size - 1))
    x1 = int(min(max(box.x_max + dx1, x0), size - 1))
    y1 = int(min(max(box.y_max + dy1, y0), size - 1))
    return BBox(x0, y0, x1, y1)


def _prepare(sample: TrainSample, cfg: ModelConfig, crop: int,
             rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    size = cfg.image_size
    image, label = sample.image, sample.label
    if image.shape[0] == size and image.shape[1] == size:
        return image, label
    image, label = sample_and_resize(image, label, rng, crop=min(crop, *image.shape[:2]),
                                     out=size)
    return image, label


def train(dataset, config: ModelConfig, settings: TrainSettings,
          params: ModelParams | None = None) -> tuple[ModelParams, list[float]]:
    """Seeded training loop with ground-truth box prompts under box dropout.

    ``dataset`` is a TripletDataset or a list of TrainSample. Gradients
    accumulate per sample in a fixed order and one AdamW step is applied per
    batch; frozen buffers never receive updates. Returns the parameters and
    the per-epoch mean loss curve.
    """
    if isinstance(dataset, list):
        samples = dataset
        get = lambda i: samples[i]
        n = len(samples)
    else:
        get = dataset.sample
        n = len(dataset)
    if n == 0:
        raise TrainingError("empty training manifest")
    if params is None:
        params = init_params(config)
    named = params.named_parameters()
    state = ag.AdamWState(lr=settings.lr, weight_decay=settings.weight_decay)
    rng = np.random.default_rng(settings.seed)
    curve: list[float] = []

    for epoch in range(settings.epochs):
        state.lr = settings.lr * settings.lr_decay ** epoch
        order = rng.permutation(n)
        epoch_losses: list[float] = []
        pending = 0
        for idx in order:
            sample = get(int(idx))
            image, label = _prepare(sample, config, settings.crop, rng)
            box = tight_bbox(label, 1)
            if box is not None and config.box_jitter > 0:
                box = _jitter_box(box, config.box_jitter, config.image_size, rng)
            if settings.color_aug > 0 and rng.random() < settings.color_aug:
                image = _shift_colors(image, rng.uniform(0.25, 0.5))
            elif rng.random() < config.box_dropout:
                box = None
            logits = forward(image, sample.prompt, box, params, training=True)
            loss = ag.softmax_cross_entropy(logits, label)
            loss.backward()
            epoch_losses.append(loss.item())
            pending += 1
            if pending == settings.batch_size:
                _apply_step(named, state, pending)
                pending = 0
        if pending:
            _apply_step(named, state, pending)
        curve.append(float(np.mean(epoch_losses)))
    return params, curve


def _apply_step(named: dict[str, ag.Tensor], state: ag.AdamWState, count: int) -> None:
    grads = {}
    for name, t in named.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        grads[name] = g / count
    new_values = ag.adamw_step({k: t.data for k, t in named.items()}, grads, state)
    for name, t in named.items():
        t.data = new_values[name]
        t.zero_grad()


# ---------------------------------------------------------------------------
# Checkpoint format: magic, little-endian uint32 header length, JSON header
# with the config and named tensor offsets, then raw little-endian float64.

_MAGIC = b"HSG1"


def save_checkpoint(path, params: ModelParams) -> None:
    entries = []
    blobs = []
    offset = 0
    groups = (("trainable", {k: t.data for k, t in params.named_parameters().items()}),
              ("frozen", params.frozen_arrays()),
              ("buffer", params.buffers()))
    for kind, tensors in groups:
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            entries.append({"name": name, "kind": kind, "offset": offset,
                            "shape": list(arr.shape)})
            blobs.append(arr.tobytes())
            offset += arr.size
    header = json.dumps({"config": asdict(params.config), "tensors": entries},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise InputError(f"{path} is not a model checkpoint")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = np.frombuffer(fh.read(), dtype="<f8")
    config = ModelConfig(**header["config"])
    params = init_params(config)
    named = params.named_parameters()
    frozen = params.frozen_arrays()
    buffers = params.buffers()
    for entry in header["tensors"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = payload[entry["offset"]:entry["offset"] + size].reshape(entry["shape"])
        if entry["kind"] == "trainable":
            named[entry["name"]].data = arr.copy()
        elif entry["kind"] == "frozen":
            frozen[entry["name"]][...] = arr
        else:
            buffers[entry["name"]][...] = arr
    params._text_rows.clear()
    return params
