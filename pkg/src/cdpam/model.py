"""The metric networks and their checkpoint format.

The audio encoder is a 16-layer 1-D CNN (15-tap kernels, stride 2 at the end
of each 4-layer block, batch norm + leaky ReLU per layer) followed by global
average pooling.  Its embedding splits into an *acoustic* half, which feeds
the loss network, and a *content* half; each half gets its own projection
head during contrastive pretraining and the heads are discarded afterwards.

The loss network is a 4-layer MLP over the acoustic embedding.  The
perceptual distance between two clips is the sum over its four hidden layers
of the mean absolute difference of activations, making it a symmetric
pseudometric that is exactly zero for identical inputs.  A small 1-16-1
classifier squashes that distance into a probability that a listener would
call the pair different.

Checkpoints are a single binary file: magic ``CDPM``, a u32 format version,
a u32 byte length followed by a JSON header (config echo, training stage,
seed, tensor directory), then the raw little-endian float64 tensor payloads
in directory order.  Round trips are bit-exact.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .audio import Waveform, fix_length, resample
from .errors import ContractError, FormatError, ShapeError, VersionError
from .tensor import Tensor

CHECKPOINT_MAGIC = b"CDPM"
CHECKPOINT_VERSION = 1
STAGES = ("init", "pretrained", "jnd", "finetuned")
LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class EncoderConfig:
    """Shape of the convolutional audio encoder.

    Layers are grouped into equal blocks; each block uses one channel width
    and the stride-2 layers (exactly four of them, so the temporal extent
    shrinks 16x) default to the last layer of each block.
    """

    n_layers: int = 16
    kernel: int = 15
    stride2_layers: tuple = (4, 8, 12, 16)
    block_channels: tuple = (128, 256, 512, 1024)
    acoustic_dim: int = 512
    content_dim: int = 512

    def __post_init__(self):
        if self.kernel % 2 == 0:
            raise ContractError("encoder kernel must be odd")
        if self.n_layers % len(self.block_channels) != 0:
            raise ContractError("n_layers must divide evenly into channel blocks")
        if len(set(self.stride2_layers)) != 4:
            raise ContractError("exactly 4 distinct stride-2 layers are required")
        if not all(1 <= i <= self.n_layers for i in self.stride2_layers):
            raise ContractError("stride2_layers out of range")
        if self.block_channels[-1] != self.embedding_dim:
            raise ContractError("final channel count must equal the embedding dimension")
        if self.acoustic_dim + self.content_dim != self.embedding_dim:
            raise ContractError("acoustic_dim + content_dim must equal embedding_dim")

    @property
    def embedding_dim(self) -> int:
        return self.acoustic_dim + self.content_dim

    @property
    def downsample_factor(self) -> int:
        return 16

    def channel_of(self, layer: int) -> int:
        per_block = self.n_layers // len(self.block_channels)
        return self.block_channels[(layer - 1) // per_block]


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = EncoderConfig()
    projection_dim: int = 256
    lossnet_widths: tuple = (512, 256, 128, 64)
    classifier_hidden: int = 16
    sample_rate: int = 16000
    clip_samples: int = 40000

    def __post_init__(self):
        if len(self.lossnet_widths) != 4:
            raise ContractError("the loss network has exactly 4 hidden transforms")
        if self.clip_samples % self.encoder.downsample_factor != 0:
            raise ContractError("clip_samples must be divisible by the encoder downsample factor")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["encoder"]["stride2_layers"] = list(self.encoder.stride2_layers)
        d["encoder"]["block_channels"] = list(self.encoder.block_channels)
        d["lossnet_widths"] = list(self.lossnet_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        enc = dict(d["encoder"])
        enc["stride2_layers"] = tuple(enc["stride2_layers"])
        enc["block_channels"] = tuple(enc["block_channels"])
        rest = {k: v for k, v in d.items() if k != "encoder"}
        rest["lossnet_widths"] = tuple(rest["lossnet_widths"])
        return cls(encoder=EncoderConfig(**enc), **rest)


def default_config() -> ModelConfig:
    """Full-size configuration: 1024-dim embedding over 16 kHz, 2.5 s clips."""
    return ModelConfig()


def desk_config() -> ModelConfig:
    """Small configuration sized for minutes-scale CPU training runs.

    Same 16-layer / 4-stride topology, but thin channels, 8 kHz audio and
    1 s clips; downsampling happens in the first four layers so most of the
    depth operates on short sequences.
    """
    enc = EncoderConfig(
        n_layers=16,
        kernel=15,
        stride2_layers=(1, 2, 3, 4),
        block_channels=(4, 8, 16, 32),
        acoustic_dim=16,
        content_dim=16,
    )
    return ModelConfig(encoder=enc, projection_dim=8, lossnet_widths=(32, 32, 16, 8),
                       sample_rate=8000, clip_samples=8000)


def tiny_config() -> ModelConfig:
    """Minimal configuration for fast unit tests."""
    enc = EncoderConfig(
        n_layers=4,
        kernel=3,
        stride2_layers=(1, 2, 3, 4),
        block_channels=(2, 4, 4, 8),
        acoustic_dim=4,
        content_dim=4,
    )
    return ModelConfig(encoder=enc, projection_dim=4, lossnet_widths=(8, 8, 4, 4),
                       sample_rate=1600, clip_samples=1600)


def _init_params(config: ModelConfig, rng: np.random.Generator) -> tuple[dict, dict]:
    enc = config.encoder
    params: dict[str, np.ndarray] = {}
    state: dict[str, np.ndarray] = {}
    c_in = 1
    for layer in range(1, enc.n_layers + 1):
        c_out = enc.channel_of(layer)
        std = np.sqrt(2.0 / (c_in * enc.kernel))
        params[f"enc.conv{layer}.w"] = rng.normal(0.0, std, size=(c_out, c_in, enc.kernel))
        params[f"enc.bn{layer}.gamma"] = np.ones(c_out)
        params[f"enc.bn{layer}.beta"] = np.zeros(c_out)
        state[f"enc.bn{layer}.running_mean"] = np.zeros(c_out)
        state[f"enc.bn{layer}.running_var"] = np.ones(c_out)
        c_in = c_out

    for head, dim in (("acoustic", enc.acoustic_dim), ("content", enc.content_dim)):
        params[f"proj.{head}.fc1.w"] = rng.normal(0.0, np.sqrt(2.0 / dim), size=(dim, dim))
        params[f"proj.{head}.fc1.b"] = np.zeros(dim)
        params[f"proj.{head}.fc2.w"] = rng.normal(0.0, np.sqrt(2.0 / dim),
                                                  size=(config.projection_dim, dim))
        params[f"proj.{head}.fc2.b"] = np.zeros(config.projection_dim)

    widths = (enc.acoustic_dim,) + tuple(config.lossnet_widths)
    for i in range(4):
        params[f"lossnet.fc{i + 1}.w"] = rng.normal(0.0, np.sqrt(2.0 / widths[i]),
                                                    size=(widths[i + 1], widths[i]))
        params[f"lossnet.fc{i + 1}.b"] = np.zeros(widths[i + 1])

    h = config.classifier_hidden
    params["clf.fc1.w"] = rng.normal(0.0, 1.0, size=(h, 1))
    params["clf.fc1.b"] = np.zeros(h)
    params["clf.fc2.w"] = rng.normal(0.0, np.sqrt(2.0 / h), size=(1, h))
    params["clf.fc2.b"] = np.zeros(1)
    return params, state


class PerceptualModel:
    """Parameter container plus the forward passes of all four networks."""

    def __init__(self, config: ModelConfig, params: dict, state: dict, stage: str = "init",
                 seed: int = 0):
        if stage not in STAGES:
            raise ContractError(f"unknown stage {stage!r}")
        self.config = config
        self.params = {name: arr if isinstance(arr, Tensor) else Tensor(arr)
                       for name, arr in params.items()}
        self.state = {name: np.asarray(arr, dtype=np.float64).copy() for name, arr in state.items()}
        self.stage = stage
        self.seed = int(seed)

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0) -> "PerceptualModel":
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xC0,)))
        params, state = _init_params(config, rng)
        return cls(config, params, state, stage="init", seed=seed)

    # -- parameter bookkeeping ------------------------------------------------

    def param_arrays(self) -> dict:
        return {name: t.data for name, t in self.params.items()}

    def set_trainable(self, prefixes: tuple) -> None:
        """Mark parameters trainable iff their name starts with one of `prefixes`."""
        for name, t in self.params.items():
            t.requires_grad = name.startswith(prefixes)
            t.grad = None

    def trainable(self) -> dict:
        return {name: t for name, t in self.params.items() if t.requires_grad}

    def apply_updates(self, new_arrays: dict) -> None:
        for name, arr in new_arrays.items():
            self.params[name].data = arr

    def clone(self) -> "PerceptualModel":
        return PerceptualModel(self.config,
                               {n: t.data.copy() for n, t in self.params.items()},
                               self.state, stage=self.stage, seed=self.seed)

    # -- forward passes ---------------------------------------------------------

    def encode(self, x: Tensor, train: bool = False) -> tuple[Tensor, Tensor]:
        """Run the CNN; returns the (acoustic, content) embedding halves."""
        if x.data.ndim != 3 or x.shape[1] != 1:
            raise ShapeError("encoder input must be [batch, 1, len]")
        enc = self.config.encoder
        if x.shape[2] % enc.downsample_factor != 0:
            raise ShapeError(
                f"input length {x.shape[2]} not divisible by {enc.downsample_factor}")
        h = x
        for layer in range(1, enc.n_layers + 1):
            stride = 2 if layer in enc.stride2_layers else 1
            h = T.conv1d(h, self.params[f"enc.conv{layer}.w"], stride=stride)
            h = T.batch_norm1d(h,
                               self.params[f"enc.bn{layer}.gamma"],
                               self.params[f"enc.bn{layer}.beta"],
                               self.state[f"enc.bn{layer}.running_mean"],
                               self.state[f"enc.bn{layer}.running_var"],
                               train=train)
            h = T.leaky_relu(h, LEAKY_SLOPE)
        pooled = T.global_avg_pool(h)
        acoustic = T.narrow(pooled, 1, 0, enc.acoustic_dim)
        content = T.narrow(pooled, 1, enc.acoustic_dim, enc.content_dim)
        return acoustic, content

    def project(self, half: Tensor, head: str) -> Tensor:
        """Projection head used only during contrastive pretraining."""
        if head not in ("acoustic", "content"):
            raise ContractError(f"unknown projection head {head!r}")
        h = T.leaky_relu(T.linear(half, self.params[f"proj.{head}.fc1.w"],
                                  self.params[f"proj.{head}.fc1.b"]), LEAKY_SLOPE)
        return T.linear(h, self.params[f"proj.{head}.fc2.w"], self.params[f"proj.{head}.fc2.b"])

    def lossnet_features(self, acoustic: Tensor) -> list:
        """The four post-activation hidden layers of the loss network."""
        feats = []
        h = acoustic
        for i in range(1, 5):
            h = T.leaky_relu(T.linear(h, self.params[f"lossnet.fc{i}.w"],
                                      self.params[f"lossnet.fc{i}.b"]), LEAKY_SLOPE)
            feats.append(h)
        return feats

    def distance_from_embeddings(self, emb_ref: Tensor, emb_per: Tensor) -> Tensor:
        """Per-row perceptual distance: layerwise mean |feature difference|, summed."""
        feats_ref = self.lossnet_features(emb_ref)
        feats_per = self.lossnet_features(emb_per)
        total = None
        for fr, fp in zip(feats_ref, feats_per):
            layer_term = T.mean_(T.absolute(T.sub(fr, fp)), axis=1)
            total = layer_term if total is None else T.add(total, layer_term)
        return total

    def judge_from_distance(self, d: Tensor) -> Tensor:
        """Probability in (0, 1) that a pair at distance d is heard as different.

        The sigmoid saturates to exactly 0/1 in double precision for extreme
        inputs, so the output is nudged back into the open interval.
        """
        if d.data.ndim != 2 or d.shape[1] != 1:
            raise ShapeError("judge expects distances shaped [batch, 1]")
        h = T.leaky_relu(T.linear(d, self.params["clf.fc1.w"], self.params["clf.fc1.b"]),
                         LEAKY_SLOPE)
        p = T.sigmoid(T.linear(h, self.params["clf.fc2.w"], self.params["clf.fc2.b"]))
        return T.clamp(p, 1e-12, 1.0 - 1e-12)

    # -- waveform-level API -------------------------------------------------------

    def conform(self, w: Waveform) -> Waveform:
        """Resample/pad/trim a waveform to the model's input contract."""
        if w.sample_rate != self.config.sample_rate:
            w = resample(w, self.config.sample_rate)
        return fix_length(w, self.config.clip_samples)

    def waves_to_tensor(self, waves) -> Tensor:
        batch = np.stack([self.conform(w).samples for w in waves])
        return Tensor(batch[:, None, :])

    def embed_waves(self, waves, batch_size: int = 64) -> np.ndarray:
        """Inference-mode acoustic embeddings for a list of waveforms."""
        chunks = []
        for start in range(0, len(waves), batch_size):
            x = self.waves_to_tensor(waves[start:start + batch_size])
            acoustic, _ = self.encode(x, train=False)
            chunks.append(acoustic.data)
        return np.concatenate(chunks, axis=0)

    def distance(self, ref: Waveform, per: Waveform) -> float:
        """Perceptual distance between two clips (inference mode)."""
        x = self.waves_to_tensor([ref, per])
        acoustic, _ = self.encode(x, train=False)
        d = self.distance_from_embeddings(T.narrow(acoustic, 0, 0, 1),
                                          T.narrow(acoustic, 0, 1, 1))
        return float(d.data[0])

    def distances_to_reference(self, ref: Waveform, others) -> np.ndarray:
        """Distances from one reference to many clips, batched for speed."""
        embs = self.embed_waves([ref] + list(others))
        ref_emb = Tensor(np.repeat(embs[:1], len(others), axis=0))
        per_emb = Tensor(embs[1:])
        return self.distance_from_embeddings(ref_emb, per_emb).data.copy()

    def judge(self, d: float) -> float:
        if not np.isfinite(d) or d < 0.0:
            raise ContractError(f"judge expects a non-negative distance, got {d}")
        p = self.judge_from_distance(Tensor(np.array([[float(d)]])))
        return float(p.data[0, 0])


# -- checkpoint I/O ---------------------------------------------------------------

def save_checkpoint(model: PerceptualModel, path) -> None:
    """Write the model atomically in the CDPM container format."""
    names = sorted(model.params) + sorted(model.state)
    kinds = ["param"] * len(model.params) + ["state"] * len(model.state)
    arrays = [model.params[n].data if k == "param" else model.state[n]
              for n, k in zip(names, kinds)]
    directory = [{"name": n, "kind": k, "shape": list(a.shape)}
                 for n, k, a in zip(names, kinds, arrays)]
    header = json.dumps({
        "config": model.config.to_dict(),
        "stage": model.stage,
        "seed": model.seed,
        "tensors": directory,
    }, sort_keys=True).encode("utf-8")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> PerceptualModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a CDPM checkpoint")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    (header_len,) = struct.unpack_from("<I", blob, 8)
    if 12 + header_len > len(blob):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[12:12 + header_len].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        directory = header["tensors"]
        stage = header["stage"]
        seed = header["seed"]
    except (ValueError, KeyError, TypeError) as err:
        raise FormatError(f"{path}: corrupt checkpoint header ({err})") from err

    offset = 12 + header_len
    params: dict[str, np.ndarray] = {}
    state: dict[str, np.ndarray] = {}
    for entry in directory:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * 8 if shape else 8
        if offset + nbytes > len(blob):
            raise FormatError(f"{path}: truncated tensor payload for {entry['name']}")
        arr = np.frombuffer(blob[offset:offset + nbytes], dtype="<f8").astype(np.float64).reshape(shape)
        offset += nbytes
        if entry["kind"] == "param":
            params[entry["name"]] = arr
        else:
            state[entry["name"]] = arr
    if offset != len(blob):
        raise FormatError(f"{path}: trailing bytes after tensor payloads")
    return PerceptualModel(config, params, state, stage=stage, seed=seed)
