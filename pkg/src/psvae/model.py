"""Single-encoder multi-decoder VAE with a Gaussian-mixture latent prior.

The encoder maps a patch through five 3x3 conv layers (ReLU) and two fully
connected layers, then three heads emit the posterior mean, the posterior
scale (as half log-variance) and the soft subspace assignment. Each decoder
mirrors the encoder: one fully connected layer, five transposed 3x3 convs
with two 2x nearest-neighbor upsamplings interleaved, ReLU on all but the
final sigmoid layer. All decoders share one architecture with independent
parameters; a patch is routed to the decoder picked by the argmax of its
soft assignment.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .errors import (
    CheckpointError,
    ConstructionError,
    DimensionError,
    NumericError,
)
from .tensor import Tensor, resolve_dtype

CHECKPOINT_MAGIC = b"PSVAE"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchDescriptor:
    """Shape plan for the encoder/decoder stack.

    ``conv_strides`` must multiply to 4 (two downsampling stages), since each
    decoder regrows the patch with exactly two 2x upsamplings.
    """

    name: str = "srgb-denoise"
    patch_size: int = 16
    channels: int = 3
    conv_channels: tuple = (16, 32, 32, 64, 64)
    conv_strides: tuple = (1, 2, 1, 2, 1)
    fc_dims: tuple = (256, 128)

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        object.__setattr__(self, "conv_strides", tuple(self.conv_strides))
        object.__setattr__(self, "fc_dims", tuple(self.fc_dims))

    @property
    def latent_spatial(self):
        d = self.patch_size
        for s in self.conv_strides:
            d = -(-d // s)
        return d

    def validate(self):
        if len(self.conv_channels) != 5:
            raise ConstructionError("encoder needs exactly 5 conv layers")
        if len(self.conv_strides) != 5:
            raise ConstructionError("encoder needs 5 conv strides")
        if len(self.fc_dims) != 2:
            raise ConstructionError("encoder needs exactly 2 fully connected layers")
        total_stride = int(np.prod(self.conv_strides))
        if total_stride != 4:
            raise ConstructionError(
                f"conv strides must multiply to 4 to match the two upsample "
                f"layers, got {total_stride}"
            )
        d = self.patch_size
        for i, s in enumerate(self.conv_strides):
            if s > 1 and d % s != 0:
                raise ConstructionError(
                    f"conv{i + 1}: spatial extent {d} is not divisible by stride {s}"
                )
            d //= s
        if d < 1:
            raise ConstructionError(f"patch size {self.patch_size} collapses below 1x1")


@dataclass
class GmmPrior:
    """S learnable Gaussian components plus a fixed categorical mixture."""

    means: Tensor  # [S, dz]
    log_scales: Tensor  # [S, dz]; component scale is exp(log_scales)
    mix: np.ndarray  # [S], fixed, uniform by default

    @property
    def component_count(self):
        return self.means.shape[0]

    def scales(self):
        """Positive per-component scales, connected to the parameter graph."""
        return T.exp(self.log_scales)

    def named_params(self):
        return {"prior.means": self.means, "prior.log_scales": self.log_scales}


@dataclass
class LatentCode:
    """Per-patch encoder output: posterior stats, assignment and a sample."""

    mu_hat: Tensor  # [dz]
    sigma_hat: Tensor  # [dz], positive
    y_hat: Tensor  # [S], on the simplex
    z: Tensor  # [dz]
    route: int  # argmax of y_hat


@dataclass
class BatchLatent:
    """Batched encoder output used by the losses and the trainer."""

    mu_hat: Tensor  # [N, dz]
    sigma_hat: Tensor  # [N, dz]
    y_hat: Tensor  # [N, S]
    z: Tensor  # [N, dz]
    routes: np.ndarray  # [N] int


@dataclass
class ModelParams:
    """Encoder parameters, prior, dummy decoder and k routed decoders."""

    arch: ArchDescriptor
    mixture_components: int
    latent_dim: int
    num_decoders: int
    precision: str
    encoder: dict = field(default_factory=dict)
    prior: GmmPrior = None
    dummy: dict = field(default_factory=dict)
    decoders: list = field(default_factory=list)

    # -- parameter views ----------------------------------------------------

    def encoder_params(self):
        return {f"encoder.{k}": v for k, v in self.encoder.items()}

    def dummy_params(self):
        return {f"dummy.{k}": v for k, v in self.dummy.items()}

    def decoder_params(self, index):
        return {f"decoder{index}.{k}": v for k, v in self.decoders[index].items()}

    def stage1_params(self):
        out = self.encoder_params()
        out.update(self.prior.named_params())
        out.update(self.dummy_params())
        return out

    def all_named(self):
        out = self.stage1_params()
        for i in range(self.num_decoders):
            out.update(self.decoder_params(i))
        return out

    def parameter_counts(self):
        counts = {
            "encoder": sum(p.size for p in self.encoder.values()),
            "prior": self.prior.means.size + self.prior.log_scales.size,
            "dummy_decoder": sum(p.size for p in self.dummy.values()),
            "decoders": [
                sum(p.size for p in dec.values()) for dec in self.decoders
            ],
        }
        counts["decoders_total"] = sum(counts["decoders"])
        counts["total"] = (
            counts["encoder"]
            + counts["prior"]
            + counts["dummy_decoder"]
            + counts["decoders_total"]
        )
        return counts

    def copy(self):
        clone = ModelParams(
            arch=self.arch,
            mixture_components=self.mixture_components,
            latent_dim=self.latent_dim,
            num_decoders=self.num_decoders,
            precision=self.precision,
        )
        clone.encoder = {k: T.parameter(v.data.copy(), v.dtype) for k, v in self.encoder.items()}
        clone.prior = GmmPrior(
            means=T.parameter(self.prior.means.data.copy(), self.prior.means.dtype),
            log_scales=T.parameter(
                self.prior.log_scales.data.copy(), self.prior.log_scales.dtype
            ),
            mix=self.prior.mix.copy(),
        )
        clone.dummy = {k: T.parameter(v.data.copy(), v.dtype) for k, v in self.dummy.items()}
        clone.decoders = [
            {k: T.parameter(v.data.copy(), v.dtype) for k, v in dec.items()}
            for dec in self.decoders
        ]
        return clone

    def set_requires_grad(self, groups, value):
        """Toggle gradient tracking for 'encoder', 'prior', 'dummy', 'decoders'."""
        if "encoder" in groups:
            for p in self.encoder.values():
                p.requires_grad = value
        if "prior" in groups:
            self.prior.means.requires_grad = value
            self.prior.log_scales.requires_grad = value
        if "dummy" in groups:
            for p in self.dummy.values():
                p.requires_grad = value
        if "decoders" in groups:
            for dec in self.decoders:
                for p in dec.values():
                    p.requires_grad = value


# -- initialization -----------------------------------------------------------


def _uniform_init(rng, shape, limit, dtype):
    return T.parameter(rng.uniform(-limit, limit, size=shape), dtype)


def _he_limit(fan_in):
    return float(np.sqrt(6.0 / fan_in))


def _xavier_limit(fan_in, fan_out):
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def _init_conv(rng, kh, kw, cin, cout, dtype, relu_gain=True):
    fan_in = kh * kw * cin
    fan_out = kh * kw * cout
    limit = _he_limit(fan_in) if relu_gain else _xavier_limit(fan_in, fan_out)
    kernel = _uniform_init(rng, (kh, kw, cin, cout), limit, dtype)
    bias = T.parameter(np.zeros(cout), dtype)
    return kernel, bias


def _init_tconv(rng, kh, kw, layer_in, layer_out, dtype, relu_gain=True):
    """Transposed layer mapping layer_in -> layer_out channels.

    The kernel keeps the forward conv layout, so its Cout slot holds the
    consumed channels and its Cin slot the emitted ones; the bias matches
    the emitted channels.
    """
    fan_in = kh * kw * layer_in
    fan_out = kh * kw * layer_out
    limit = _he_limit(fan_in) if relu_gain else _xavier_limit(fan_in, fan_out)
    kernel = _uniform_init(rng, (kh, kw, layer_out, layer_in), limit, dtype)
    bias = T.parameter(np.zeros(layer_out), dtype)
    return kernel, bias


def _init_dense(rng, n_in, n_out, dtype, relu_gain=True):
    limit = _he_limit(n_in) if relu_gain else _xavier_limit(n_in, n_out)
    weight = _uniform_init(rng, (n_in, n_out), limit, dtype)
    bias = T.parameter(np.zeros(n_out), dtype)
    return weight, bias


def _init_encoder(arch, latent_dim, mixture_components, rng, dtype):
    params = {}
    cin = arch.channels
    for i, (cout, _) in enumerate(zip(arch.conv_channels, arch.conv_strides)):
        k, b = _init_conv(rng, 3, 3, cin, cout, dtype)
        params[f"conv{i + 1}.kernel"] = k
        params[f"conv{i + 1}.bias"] = b
        cin = cout
    flat = arch.latent_spatial**2 * arch.conv_channels[-1]
    dims = (flat,) + arch.fc_dims
    for i in range(2):
        w, b = _init_dense(rng, dims[i], dims[i + 1], dtype)
        params[f"fc{i + 1}.weight"] = w
        params[f"fc{i + 1}.bias"] = b
    feat = arch.fc_dims[-1]
    for head, width in (
        ("head_mu", latent_dim),
        ("head_logvar", latent_dim),
        ("head_y", mixture_components),
    ):
        w, b = _init_dense(rng, feat, width, dtype, relu_gain=False)
        params[f"{head}.weight"] = w
        params[f"{head}.bias"] = b
    return params


def _decoder_plan(arch):
    """Channel chain for the five transposed conv layers."""
    c = arch.conv_channels
    return [
        (c[4], c[3]),
        (c[3], c[2]),
        (c[2], c[1]),
        (c[1], c[0]),
        (c[0], arch.channels),
    ]


def _init_decoder(arch, latent_dim, rng, dtype):
    params = {}
    sp = arch.latent_spatial
    w, b = _init_dense(rng, latent_dim, sp * sp * arch.conv_channels[-1], dtype)
    params["fc.weight"] = w
    params["fc.bias"] = b
    for i, (c_in, c_out) in enumerate(_decoder_plan(arch)):
        last = i == 4
        k, bz = _init_tconv(rng, 3, 3, c_in, c_out, dtype, relu_gain=not last)
        params[f"tconv{i + 1}.kernel"] = k
        params[f"tconv{i + 1}.bias"] = bz
    return params


def build_model(arch, mixture_components, latent_dim, rng, num_decoders=None, precision="f32"):
    """Fresh model parameters, deterministic for a given generator state."""
    arch.validate()
    if mixture_components < 1:
        raise ConstructionError(f"mixture_components must be >= 1, got {mixture_components}")
    if latent_dim < 1:
        raise ConstructionError(f"latent_dim must be >= 1, got {latent_dim}")
    k = mixture_components if num_decoders is None else num_decoders
    if k != mixture_components and k != 1:
        raise ConstructionError(
            f"num_decoders must equal mixture_components or 1 so the argmax "
            f"route maps onto a decoder; got {k} decoders for "
            f"{mixture_components} components"
        )
    dtype = resolve_dtype(precision)
    model = ModelParams(
        arch=arch,
        mixture_components=mixture_components,
        latent_dim=latent_dim,
        num_decoders=k,
        precision=precision,
    )
    model.encoder = _init_encoder(arch, latent_dim, mixture_components, rng, dtype)
    model.prior = GmmPrior(
        means=T.parameter(rng.standard_normal((mixture_components, latent_dim)), dtype),
        log_scales=T.parameter(np.zeros((mixture_components, latent_dim)), dtype),
        mix=np.full(mixture_components, 1.0 / mixture_components),
    )
    model.dummy = _init_decoder(arch, latent_dim, rng, dtype)
    model.decoders = [
        _init_decoder(arch, latent_dim, rng, dtype) for _ in range(k)
    ]
    return model


def reinit_decoder(model, index, rng):
    """Replace one routed decoder with a fresh random initialization."""
    dtype = resolve_dtype(model.precision)
    model.decoders[index] = _init_decoder(model.arch, model.latent_dim, rng, dtype)


# -- forward passes -----------------------------------------------------------


def _encoder_forward(x, model):
    """x: Tensor [N,D,D,C] -> (mu [N,dz], sigma [N,dz], y_hat [N,S])."""
    arch = model.arch
    enc = model.encoder
    h = x
    for i, stride in enumerate(arch.conv_strides):
        h = T.conv2d(h, enc[f"conv{i + 1}.kernel"], stride=stride, padding="same")
        h = T.relu(T.add(h, enc[f"conv{i + 1}.bias"]))
    n = h.shape[0]
    h = T.reshape(h, (n, arch.latent_spatial**2 * arch.conv_channels[-1]))
    for i in range(2):
        h = T.relu(T.dense(h, enc[f"fc{i + 1}.weight"], enc[f"fc{i + 1}.bias"]))
    mu = T.dense(h, enc["head_mu.weight"], enc["head_mu.bias"])
    logvar = T.dense(h, enc["head_logvar.weight"], enc["head_logvar.bias"])
    sigma = T.exp(T.mul(logvar, 0.5))
    y_hat = T.softmax(
        T.dense(h, enc["head_y.weight"], enc["head_y.bias"]), axis=-1
    )
    for name, t in (("mu", mu), ("sigma", sigma), ("y_hat", y_hat)):
        if not np.isfinite(t.data).all():
            raise NumericError(f"encoder produced non-finite {name}")
    return mu, sigma, y_hat


def _check_patch_shape(arr, model, batched):
    arch = model.arch
    want = (arch.patch_size, arch.patch_size, arch.channels)
    got = arr.shape[1:] if batched else arr.shape
    if tuple(got) != want:
        raise DimensionError(f"patch shape {tuple(got)} does not match arch {want}")


def encode_batch(patches, model, rng=None):
    """Encode [N,D,D,C] patches; z is sampled when ``rng`` is given, else mu."""
    dtype = resolve_dtype(model.precision)
    x = patches if isinstance(patches, Tensor) else Tensor(np.asarray(patches, dtype=dtype))
    _check_patch_shape(x.data, model, batched=True)
    mu, sigma, y_hat = _encoder_forward(x, model)
    if rng is None:
        z = mu
    else:
        eps = rng.standard_normal(mu.shape, dtype=dtype)
        z = T.add(mu, T.mul(sigma, Tensor(eps)))
    routes = np.argmax(y_hat.data, axis=-1)
    return BatchLatent(mu_hat=mu, sigma_hat=sigma, y_hat=y_hat, z=z, routes=routes)


def encode(patch, model, rng=None):
    """Encode one [D,D,C] patch into a LatentCode."""
    dtype = resolve_dtype(model.precision)
    arr = patch.data if isinstance(patch, Tensor) else np.asarray(patch, dtype=dtype)
    _check_patch_shape(arr, model, batched=False)
    batch = encode_batch(arr[None], model, rng=rng)
    return LatentCode(
        mu_hat=T.reshape(batch.mu_hat, (model.latent_dim,)),
        sigma_hat=T.reshape(batch.sigma_hat, (model.latent_dim,)),
        y_hat=T.reshape(batch.y_hat, (model.mixture_components,)),
        z=T.reshape(batch.z, (model.latent_dim,)),
        route=int(batch.routes[0]),
    )


def route(y_hat):
    """Index of the largest soft-assignment entry; ties go to the lowest index."""
    arr = y_hat.data if isinstance(y_hat, Tensor) else np.asarray(y_hat)
    return int(np.argmax(arr))


def _decoder_forward(z, params, arch):
    sp = arch.latent_spatial
    c_top = arch.conv_channels[-1]
    n = z.shape[0]
    h = T.relu(T.dense(z, params["fc.weight"], params["fc.bias"]))
    h = T.reshape(h, (n, sp, sp, c_top))
    for i in range(5):
        h = T.conv2d_transpose(h, params[f"tconv{i + 1}.kernel"], stride=1, padding="same")
        h = T.add(h, params[f"tconv{i + 1}.bias"])
        if i == 4:
            h = T.sigmoid(h)
        else:
            h = T.relu(h)
        if i in (0, 2):
            h = T.upsample2x_nearest(h)
    return h


def _decoder_dict(model, which):
    if which == "dummy":
        return model.dummy
    if not 0 <= which < model.num_decoders:
        raise DimensionError(
            f"decoder index {which} out of range for {model.num_decoders} decoders"
        )
    return model.decoders[which]


def decode_batch(z, model, which):
    """Decode [N,dz] latents through decoder ``which`` ('dummy' or an index)."""
    dtype = resolve_dtype(model.precision)
    zt = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=dtype))
    if zt.ndim != 2 or zt.shape[1] != model.latent_dim:
        raise DimensionError(f"expected [N,{model.latent_dim}] latents, got {zt.shape}")
    out = _decoder_forward(zt, _decoder_dict(model, which), model.arch)
    if not np.isfinite(out.data).all():
        raise NumericError("decoder produced non-finite output")
    return out


def decode(z, model, which):
    """Decode one [dz] latent into a [D,D,C] patch."""
    dtype = resolve_dtype(model.precision)
    zt = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=dtype))
    if zt.ndim != 1:
        raise DimensionError(f"expected a [dz] latent, got {zt.shape}")
    out = decode_batch(T.reshape(zt, (1, model.latent_dim)), model, which)
    d = model.arch.patch_size
    return T.reshape(out, (d, d, model.arch.channels))


# -- checkpoint format --------------------------------------------------------


def _write_tensor(buf, name, arr):
    encoded = name.encode("utf-8")
    buf.write(struct.pack("<I", len(encoded)))
    buf.write(encoded)
    buf.write(struct.pack("<I", arr.ndim))
    for extent in arr.shape:
        buf.write(struct.pack("<I", extent))
    le = arr.astype("<f4" if arr.dtype == np.float32 else "<f8", copy=False)
    buf.write(le.tobytes())


def _read_exact(buf, n):
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def _read_tensor(buf, dtype):
    (name_len,) = struct.unpack("<I", _read_exact(buf, 4))
    name = _read_exact(buf, name_len).decode("utf-8")
    (rank,) = struct.unpack("<I", _read_exact(buf, 4))
    shape = tuple(
        struct.unpack("<I", _read_exact(buf, 4))[0] for _ in range(rank)
    )
    count = int(np.prod(shape)) if shape else 1
    width = 4 if dtype == np.float32 else 8
    raw = _read_exact(buf, count * width)
    arr = np.frombuffer(raw, dtype="<f4" if dtype == np.float32 else "<f8")
    return name, arr.reshape(shape).astype(dtype)


def checkpoint_bytes(model):
    """Serialize a model to the versioned binary container."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    dtype = resolve_dtype(model.precision)
    buf.write(struct.pack("<B", 4 if dtype == np.float32 else 8))
    buf.write(
        struct.pack(
            "<III",
            model.mixture_components,
            model.latent_dim,
            model.num_decoders,
        )
    )
    arch_json = json.dumps(asdict(model.arch), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(arch_json)))
    buf.write(arch_json)

    named = dict(model.all_named())
    named["prior.mix"] = Tensor(model.prior.mix.astype(dtype))
    buf.write(struct.pack("<I", len(named)))
    for name, t in named.items():
        _write_tensor(buf, name, t.data)
    return buf.getvalue()


def save_checkpoint(path, model):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def model_from_checkpoint_bytes(raw):
    buf = io.BytesIO(raw)
    if _read_exact(buf, len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a model checkpoint (bad magic)")
    (version,) = struct.unpack("<I", _read_exact(buf, 4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} not supported (expected "
            f"{CHECKPOINT_VERSION})"
        )
    (width,) = struct.unpack("<B", _read_exact(buf, 1))
    if width not in (4, 8):
        raise CheckpointError(f"unknown precision width {width}")
    dtype = np.float32 if width == 4 else np.float64
    s, dz, k = struct.unpack("<III", _read_exact(buf, 12))
    (arch_len,) = struct.unpack("<I", _read_exact(buf, 4))
    arch_dict = json.loads(_read_exact(buf, arch_len).decode("utf-8"))
    arch = ArchDescriptor(**arch_dict)
    arch.validate()
    (n_tensors,) = struct.unpack("<I", _read_exact(buf, 4))

    tensors = {}
    for _ in range(n_tensors):
        name, arr = _read_tensor(buf, dtype)
        tensors[name] = arr

    model = ModelParams(
        arch=arch,
        mixture_components=s,
        latent_dim=dz,
        num_decoders=k,
        precision="f32" if width == 4 else "f64",
    )
    try:
        mix = tensors.pop("prior.mix")
        model.prior = GmmPrior(
            means=T.parameter(tensors.pop("prior.means"), dtype),
            log_scales=T.parameter(tensors.pop("prior.log_scales"), dtype),
            mix=mix.astype(np.float64),
        )
        model.decoders = [{} for _ in range(k)]
        for name, arr in tensors.items():
            group, key = name.split(".", 1)
            if group == "encoder":
                model.encoder[key] = T.parameter(arr, dtype)
            elif group == "dummy":
                model.dummy[key] = T.parameter(arr, dtype)
            elif group.startswith("decoder"):
                model.decoders[int(group[len("decoder") :])][key] = T.parameter(arr, dtype)
            else:
                raise CheckpointError(f"unknown tensor group {group!r}")
    except KeyError as exc:
        raise CheckpointError(f"checkpoint missing tensor {exc}") from exc
    return model


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return model_from_checkpoint_bytes(fh.read())
