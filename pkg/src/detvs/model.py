# Copyright (c) 2024 The DetVS Authors
#
# SPDX-License-Identifier: Apache-2.0

"""Distance Estimation Transformer (DET).

Desk-scale network fusing both camera images and the head joint angles:

- per-camera tokenizers: strided convolution stack, flattened row-major,
  projected to the embedding dimension, plus fixed 2D sinusoidal
  position embeddings
- joint-angle token: linear projection plus a learnable embedding
- transformer encoder over [head tokens, torso tokens, angle token]
- transformer decoder: one learnable query per perception head,
  with full cross-attention over the encoder memory
- per-head MLPs output amplified distance vectors, a shared linear
  layer outputs one confidence logit per head

Model variants:

- "mph": multi-perception-head DET
- "sph": the same network with a single head (fixed gain, uniform weight)
- "plain": tokenizer features and an MLP, no transformer, single head

Layer indices (non-finite activation diagnostics): 0 for the tokenizers,
then encoder layers 1..L_enc, decoder layers L_enc + 1..L_enc + L_dec,
and L_enc + L_dec + 1 for the output heads.

Unit tests and examples: tests/test_detvs_model.py
"""


from typing import (
    Any,
    Callable,
    Dict,
    List,
    NamedTuple,
    Optional,
    Tuple,
    Type,
    Union,
)

from dataclasses import asdict, dataclass
import hashlib
import logging
import math
import struct

import numpy as np
from numpy.typing import NDArray
import torch
from torch import nn
import yaml

from detvs.config import DetVSConfig
from detvs.dataset import DatasetArrays, encode_batch, split_groups
from detvs.errors import NonFiniteError, TrainingDivergedError
from detvs.mph import (
    HeadBank,
    HeadOutputs,
    LossConfig,
    mph_loss_terms,
    select_and_decode,
)
from detvs.scene import Observation


_LOG = logging.getLogger(__name__)

VARIANTS = ("mph", "sph", "plain")
"""Model variants."""

_DTYPES = {"float32": torch.float32, "float64": torch.float64}

_ACTIVATIONS: Dict[str, Type[nn.Module]] = {"relu": nn.ReLU, "gelu": nn.GELU}


@dataclass(frozen=True)
class ModelConfig:
    """Network dimensions."""

    image_size: int = 64
    """Square image side (pixels)."""
    channels: int = 1
    embed_dim: int = 64
    attn_heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    ffn_dim: int = 128
    token_grid: int = 8
    conv_channels: int = 32
    mlp_hidden: int = 64
    n_heads: int = 4
    """Perception heads."""
    dtype: str = "float32"
    activation: str = "relu"
    """Hidden activation: relu or gelu (smooth, for gradient checks)."""

    def __post_init__(self) -> None:
        if self.embed_dim % self.attn_heads:
            raise ValueError("embedding dim not divisible by attention heads")
        if self.embed_dim % 4:
            raise ValueError("embedding dim must be a multiple of 4")
        ratio, rem = divmod(self.image_size, self.token_grid)
        if rem or ratio < 1 or ratio & (ratio - 1):
            raise ValueError("image size / token grid must be a power of 2")
        if self.n_heads < 1:
            raise ValueError("at least one perception head")
        if self.dtype not in _DTYPES:
            raise ValueError(f"unsupported dtype: {self.dtype}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unsupported activation: {self.activation}")

    @classmethod
    def from_config(
        cls, cfg: DetVSConfig, n_heads: int = 4
    ) -> "ModelConfig":
        """Model dimensions from the "model.*" and "scene.*" options.

        Raises:
            DetVSConfig.Error: Invalid options.
        """
        width = cfg.getint("scene.image_width")
        if cfg.getint("scene.image_height") != width:
            raise DetVSConfig.Error("scene: model requires square images")
        try:
            return cls(
                width,
                cfg.getint("scene.channels"),
                cfg.getint("model.embed_dim"),
                cfg.getint("model.attn_heads"),
                cfg.getint("model.encoder_layers"),
                cfg.getint("model.decoder_layers"),
                cfg.getint("model.ffn_dim"),
                cfg.getint("model.token_grid"),
                cfg.getint("model.conv_channels"),
                cfg.getint("model.mlp_hidden"),
                n_heads,
                cfg.getstr("model.dtype"),
                cfg.getstr("model.activation"),
            )
        except ValueError as e:
            raise DetVSConfig.Error(f"model: {e}") from e

    @property
    def torch_dtype(self) -> torch.dtype:
        """Parameter dtype."""
        return _DTYPES[self.dtype]

    @property
    def n_tokens(self) -> int:
        """Tokens per image."""
        return self.token_grid**2


def sinusoidal_embedding_2d(grid: int, dim: int) -> torch.Tensor:
    """Fixed 2D sinusoidal position embeddings, (grid * grid) x dim.

    Tokens are ordered row-major. The first dim/2 features encode the row,
    the last dim/2 the column; within each half features interleave
    sin (even) and cos (odd) over geometrically spaced frequencies:

        pe[2i] = sin(pos / 10000^(2i / (dim / 2)))
        pe[2i + 1] = cos(pos / 10000^(2i / (dim / 2)))
    """
    half = dim // 2
    pos = torch.arange(grid, dtype=torch.float64)[:, None]
    freq = torch.pow(
        10000.0, -torch.arange(0, half, 2, dtype=torch.float64) / half
    )
    pe1 = torch.zeros(grid, half, dtype=torch.float64)
    pe1[:, 0::2] = torch.sin(pos * freq)
    pe1[:, 1::2] = torch.cos(pos * freq)
    rows = pe1[:, None, :].expand(grid, grid, half)
    cols = pe1[None, :, :].expand(grid, grid, half)
    return torch.cat((rows, cols), dim=-1).reshape(grid * grid, dim)


class ImageTokenizer(nn.Module):
    """Strided convolution stack, projection, position embeddings."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        n_down = int(math.log2(cfg.image_size // cfg.token_grid))
        layers: List[nn.Module] = []
        in_ch = cfg.channels
        for _ in range(max(n_down, 1)):
            stride = 2 if n_down else 1
            layers += [
                nn.Conv2d(
                    in_ch, cfg.conv_channels, 3, stride=stride, padding=1
                ),
                _ACTIVATIONS[cfg.activation](),
            ]
            in_ch = cfg.conv_channels
        self.convs = nn.Sequential(*layers)
        self.proj = nn.Linear(cfg.conv_channels, cfg.embed_dim)
        self.register_buffer(
            "pos_embedding",
            sinusoidal_embedding_2d(cfg.token_grid, cfg.embed_dim),
        )
        self.image_size = cfg.image_size
        self.channels = cfg.channels

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """Tokens, B x (grid * grid) x d, from B x H x W x C images.

        Raises:
            ValueError: Image shape mismatch.
        """
        expected = (self.image_size, self.image_size, self.channels)
        if tuple(images.shape[1:]) != expected:
            raise ValueError(f"invalid image shape: {tuple(images.shape)}")
        features = self.convs(images.permute(0, 3, 1, 2))
        tokens = features.flatten(2).transpose(1, 2)
        return self.proj(tokens) + self.pos_embedding.to(tokens.dtype)


class AngleEmbedding(nn.Module):
    """Head joint angles token: linear(2 -> d) plus a learnable embedding."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.proj = nn.Linear(2, cfg.embed_dim)
        self.embedding = nn.Parameter(torch.zeros(cfg.embed_dim))
        nn.init.normal_(self.embedding, std=0.02)

    def forward(self, angles: torch.Tensor) -> torch.Tensor:
        """One token, B x 1 x d, from B x 2 (yaw, pitch)."""
        return (self.proj(angles) + self.embedding)[:, None, :]


def _check_finite(tensor: torch.Tensor, layer: int) -> None:
    if not bool(torch.isfinite(tensor).all()):
        raise NonFiniteError("non-finite activations", layer)


class DETModel(nn.Module):
    """Distance Estimation Transformer with n perception heads."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.head_tokenizer = ImageTokenizer(cfg)
        self.torso_tokenizer = ImageTokenizer(cfg)
        self.angle_embedding = AngleEmbedding(cfg)
        self.encoder_layers = nn.ModuleList(
            nn.TransformerEncoderLayer(
                d,
                cfg.attn_heads,
                cfg.ffn_dim,
                dropout=0.0,
                activation=cfg.activation,
                batch_first=True,
                norm_first=True,
            )
            for _ in range(cfg.encoder_layers)
        )
        self.encoder_norm = nn.LayerNorm(d)
        self.queries = nn.Parameter(torch.zeros(cfg.n_heads, d))
        nn.init.normal_(self.queries, std=1.0)
        self.decoder_layers = nn.ModuleList(
            nn.TransformerDecoderLayer(
                d,
                cfg.attn_heads,
                cfg.ffn_dim,
                dropout=0.0,
                activation=cfg.activation,
                batch_first=True,
                norm_first=True,
            )
            for _ in range(cfg.decoder_layers)
        )
        self.decoder_norm = nn.LayerNorm(d)
        self.distance_mlps = nn.ModuleList(
            nn.Sequential(
                nn.Linear(d, cfg.mlp_hidden),
                _ACTIVATIONS[cfg.activation](),
                nn.Linear(cfg.mlp_hidden, cfg.mlp_hidden),
                _ACTIVATIONS[cfg.activation](),
                nn.Linear(cfg.mlp_hidden, 3),
            )
            for _ in range(cfg.n_heads)
        )
        self.confidence = nn.Linear(d, 1)

    @property
    def n_heads(self) -> int:
        """Perception heads."""
        return self.cfg.n_heads

    def tokenize(
        self, head: torch.Tensor, torso: torch.Tensor, angles: torch.Tensor
    ) -> torch.Tensor:
        """Encoder input: head tokens, torso tokens, angle token."""
        tokens = torch.cat(
            (
                self.head_tokenizer(head),
                self.torso_tokenizer(torso),
                self.angle_embedding(angles),
            ),
            dim=1,
        )
        _check_finite(tokens, 0)
        return tokens

    def decode_tokens(self, tokens: torch.Tensor) -> HeadOutputs:
        """Encoder, decoder and output heads over a token sequence."""
        memory = tokens
        layer = 0
        for enc in self.encoder_layers:
            layer += 1
            memory = enc(memory)
            _check_finite(memory, layer)
        memory = self.encoder_norm(memory)

        out = self.queries[None].expand(tokens.shape[0], -1, -1)
        for dec in self.decoder_layers:
            layer += 1
            out = dec(out, memory)
            _check_finite(out, layer)
        out = self.decoder_norm(out)

        distances = torch.stack(
            [mlp(out[:, h]) for h, mlp in enumerate(self.distance_mlps)], dim=1
        )
        logits = self.confidence(out).squeeze(-1)
        _check_finite(distances, layer + 1)
        _check_finite(logits, layer + 1)
        return HeadOutputs(distances, logits)

    def forward(
        self, head: torch.Tensor, torso: torch.Tensor, angles: torch.Tensor
    ) -> HeadOutputs:
        """Per-head amplified distances (B x n x 3) and logits (B x n).

        Raises:
            NonFiniteError: Non-finite activations, with the layer index.
        """
        return self.decode_tokens(self.tokenize(head, torso, angles))


class PlainRegressor(nn.Module):
    """Tokenizer features and an MLP, single output head."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.head_tokenizer = ImageTokenizer(cfg)
        self.torso_tokenizer = ImageTokenizer(cfg)
        self.angle_embedding = AngleEmbedding(cfg)
        self.mlp = nn.Sequential(
            nn.Linear((2 * cfg.n_tokens + 1) * d, cfg.mlp_hidden),
            _ACTIVATIONS[cfg.activation](),
            nn.Linear(cfg.mlp_hidden, cfg.mlp_hidden),
            _ACTIVATIONS[cfg.activation](),
            nn.Linear(cfg.mlp_hidden, 3),
        )

    @property
    def n_heads(self) -> int:
        """Always a single head."""
        return 1

    def forward(
        self, head: torch.Tensor, torso: torch.Tensor, angles: torch.Tensor
    ) -> HeadOutputs:
        """Amplified distance (B x 1 x 3), and zero logits (B x 1)."""
        tokens = torch.cat(
            (
                self.head_tokenizer(head),
                self.torso_tokenizer(torso),
                self.angle_embedding(angles),
            ),
            dim=1,
        )
        _check_finite(tokens, 0)
        distances = self.mlp(tokens.flatten(1))[:, None, :]
        _check_finite(distances, 1)
        return HeadOutputs(distances, distances.new_zeros(distances.shape[:2]))


Estimator = Union[DETModel, PlainRegressor]


def build_model(cfg: ModelConfig, variant: str, seed: int = 0) -> Estimator:
    """Initialize a model variant.

    Initialization draws from a private generator state: the global torch
    random state is left untouched.

    Args:
        cfg: Network dimensions, n_heads is overridden by the variant.
        variant: One of VARIANTS.
        seed: Initialization seed.

    Raises:
        ValueError: Unknown variant.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown model variant: {variant}")
    n_heads = cfg.n_heads if variant == "mph" else 1
    cfg = ModelConfig(**{**asdict(cfg), "n_heads": n_heads})
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model: Estimator = (
            PlainRegressor(cfg) if variant == "plain" else DETModel(cfg)
        )
    return model.to(cfg.torch_dtype)


def tokenize_image(
    model: Estimator, image: NDArray[Any], camera: str
) -> torch.Tensor:
    """Tokens of one image (grid * grid x d).

    Args:
        model: The network.
        image: H x W x C image.
        camera: "head" or "torso".
    """
    tokenizer = (
        model.head_tokenizer if camera == "head" else model.torso_tokenizer
    )
    with torch.no_grad():
        batch = torch.as_tensor(image, dtype=model.cfg.torch_dtype)[None]
        return tokenizer(batch)[0]


def embed_angles(model: Estimator, yaw: float, pitch: float) -> torch.Tensor:
    """Joint-angle token of one observation (d)."""
    with torch.no_grad():
        angles = torch.tensor([[yaw, pitch]], dtype=model.cfg.torch_dtype)
        return model.angle_embedding(angles)[0, 0]


class Batch(NamedTuple):
    """Training batch tensors."""

    head: torch.Tensor
    torso: torch.Tensor
    angles: torch.Tensor
    d_o: torch.Tensor
    con_o: torch.Tensor
    d_r: torch.Tensor

    @property
    def d_r_norm(self) -> torch.Tensor:
        """True distance norms (B)."""
        return torch.linalg.vector_norm(self.d_r, dim=-1)

    @property
    def size(self) -> int:
        """Batch size."""
        return int(self.head.shape[0])


def make_batch(
    arrays: DatasetArrays,
    bank: HeadBank,
    dtype: torch.dtype = torch.float32,
    index: Optional[NDArray[np.int64]] = None,
) -> Batch:
    """Tensors of a dataset subset, with encoded targets.

    Raises:
        OutOfRangeError: A distance is outside the bank range.
    """
    sel = slice(None) if index is None else index
    d_r = arrays.d_r[sel]
    d_o, con_o = encode_batch(d_r, bank)
    return Batch(
        torch.as_tensor(arrays.head_images[sel], dtype=dtype),
        torch.as_tensor(arrays.torso_images[sel], dtype=dtype),
        torch.as_tensor(arrays.angles[sel], dtype=dtype),
        torch.as_tensor(d_o, dtype=dtype),
        torch.as_tensor(con_o, dtype=dtype),
        torch.as_tensor(d_r, dtype=dtype),
    )


def observation_batch(
    observations: List[Observation], dtype: torch.dtype = torch.float32
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Network inputs of observations."""
    head = np.stack([o.head_image for o in observations])
    torso = np.stack([o.torso_image for o in observations])
    angles = np.array([(o.head_yaw, o.head_pitch) for o in observations])
    return (
        torch.as_tensor(head, dtype=dtype),
        torch.as_tensor(torso, dtype=dtype),
        torch.as_tensor(angles, dtype=dtype),
    )


def predict(model: Estimator, observation: Observation) -> HeadOutputs:
    """Forward pass on one observation, without gradients.

    Raises:
        NonFiniteError: Non-finite activations.
    """
    model.eval()
    with torch.no_grad():
        out = model(*observation_batch([observation], model.cfg.torch_dtype))
    return HeadOutputs(out.distances[0], out.logits[0])


def backward(
    model: Estimator,
    batch: Batch,
    adjoint: Union[float, torch.Tensor],
    bank: HeadBank,
    loss_cfg: LossConfig,
) -> Dict[str, torch.Tensor]:
    """Reverse-mode gradients of the combined loss through the network.

    Args:
        model: The network.
        batch: Inputs and targets.
        adjoint: Scalar adjoint of the batch-mean loss,
          or per-sample adjoints of the per-sample losses (B).
        bank: Head bank.
        loss_cfg: Loss settings.

    Returns:
        Gradient of every named parameter (zeros where unused).
    """
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    pred = model(batch.head, batch.torso, batch.angles)
    losses = mph_loss_terms(
        pred, batch.d_o, batch.con_o, batch.d_r_norm, bank, loss_cfg
    ).total
    if isinstance(adjoint, torch.Tensor) and adjoint.ndim == 1:
        out, grad_out = losses, adjoint.to(losses.dtype)
    else:
        out = losses.mean()
        grad_out = torch.as_tensor(adjoint, dtype=losses.dtype)
    grads = torch.autograd.grad(
        out, [p for _, p in named], grad_outputs=grad_out, allow_unused=True
    )
    return {
        name: torch.zeros_like(p) if g is None else g
        for (name, p), g in zip(named, grads)
    }


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings."""

    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-4
    close_range: float = 0.016
    """Distance norm bound of the close-range error (m)."""
    validation_groups: int = 0
    """Measurement groups held out of training for the close-range error,
    0 to report it on the training set."""

    @classmethod
    def from_config(cls, cfg: DetVSConfig) -> "TrainConfig":
        """Optimizer settings from the "train.*" options."""
        return cls(
            cfg.getint("train.epochs"),
            cfg.getint("train.batch_size"),
            cfg.getfloat("train.lr"),
            cfg.getfloat("train.weight_decay"),
            cfg.getfloat("train.close_range"),
            cfg.getint("train.validation_groups"),
        )


@dataclass(frozen=True)
class EpochStats:
    """Per-epoch training history row."""

    epoch: int
    loss: float
    """Mean combined loss."""
    distance_loss: float
    confidence_loss: float
    close_range_error: float
    """Mean decoded error of close-range samples (m), NaN if none."""

    HEADER = (
        "epoch",
        "loss",
        "distance_loss",
        "confidence_loss",
        "close_range_error",
    )


@dataclass(frozen=True)
class EstimatorReport:
    """Decoded distance errors on a dataset."""

    count: int
    mean_error: float
    """Mean decoded error (m)."""
    close_range_error: float
    """Mean decoded error of close-range samples (m), NaN if none."""
    selection_accuracy: float
    """Fraction of samples whose selected head is the designated head."""
    head_counts: Tuple[int, ...]
    """Samples per designated head."""
    head_errors: Tuple[float, ...]
    """Mean decoded error per designated head (m), NaN if no sample."""


def evaluate_estimator(
    model: Estimator,
    arrays: DatasetArrays,
    bank: HeadBank,
    close_range: float = 0.016,
    batch_size: int = 256,
) -> EstimatorReport:
    """Decode a dataset, and report errors and head selection accuracy."""
    n = len(arrays.d_r)
    if n == 0:
        nan = float("nan")
        return EstimatorReport(
            0, nan, nan, nan, (0,) * bank.n_heads, (nan,) * bank.n_heads
        )
    model.eval()
    dtype = model.cfg.torch_dtype
    decoded = np.zeros((n, 3))
    selected = np.zeros(n, dtype=np.int64)
    with torch.no_grad():
        for start in range(0, n, batch_size):
            sel = np.arange(start, min(start + batch_size, n))
            batch = make_batch(arrays, bank, dtype, sel)
            out = model(batch.head, batch.torso, batch.angles)
            dec = select_and_decode(
                out.distances.double().numpy(),
                out.logits.double().numpy(),
                bank,
            )
            decoded[sel] = dec.distance
            selected[sel] = dec.head

    norms = np.linalg.norm(arrays.d_r, axis=1)
    errors = np.linalg.norm(decoded - arrays.d_r, axis=1)
    designated = bank.head_indices(norms)
    close = norms < close_range
    counts = tuple(int(np.sum(designated == h)) for h in range(bank.n_heads))
    head_errors = tuple(
        float(errors[designated == h].mean()) if counts[h] else float("nan")
        for h in range(bank.n_heads)
    )
    return EstimatorReport(
        n,
        float(errors.mean()),
        float(errors[close].mean()) if close.any() else float("nan"),
        float(np.mean(selected == designated)),
        counts,
        head_errors,
    )


def train(
    model: Estimator,
    arrays: DatasetArrays,
    bank: HeadBank,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    seed: int = 0,
    on_epoch: Optional[Callable[[EpochStats], None]] = None,
) -> List[EpochStats]:
    """Train a model in place with AdamW.

    Mini-batches are shuffled by a generator seeded from the seed:
    the history and the final parameters are deterministic.
    With train_cfg.validation_groups, the last measurement groups are
    held out of training and the close-range error is reported on them.

    Args:
        model: The network.
        arrays: Dataset.
        bank: Head bank of the variant.
        loss_cfg: Loss settings.
        train_cfg: Optimizer settings.
        seed: Shuffling seed.
        on_epoch: Called with each epoch's statistics.

    Returns:
        One history row per epoch.

    Raises:
        ValueError: Empty training set, or too many held-out groups.
        TrainingDivergedError: Non-finite loss, with the epoch index.
    """
    arrays, held_out = split_groups(arrays, train_cfg.validation_groups)
    if not len(held_out.d_r):
        held_out = arrays
    n = len(arrays.d_r)
    if n == 0:
        raise ValueError("empty training set")
    history: List[EpochStats] = []
    if train_cfg.epochs <= 0:
        return history

    dtype = model.cfg.torch_dtype
    full = make_batch(arrays, bank, dtype)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=train_cfg.lr, weight_decay=train_cfg.weight_decay
    )
    gen = torch.Generator().manual_seed(seed)

    for epoch in range(1, train_cfg.epochs + 1):
        model.train()
        perm = torch.randperm(n, generator=gen)
        sums = np.zeros(3)
        for start in range(0, n, train_cfg.batch_size):
            idx = perm[start : start + train_cfg.batch_size]
            batch = Batch(*(t[idx] for t in full))
            try:
                pred = model(batch.head, batch.torso, batch.angles)
                terms = mph_loss_terms(
                    pred, batch.d_o, batch.con_o, batch.d_r_norm, bank, loss_cfg
                )
            except NonFiniteError as e:
                raise TrainingDivergedError(epoch) from e
            loss = terms.total.mean()
            if not bool(torch.isfinite(loss)):
                raise TrainingDivergedError(epoch)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            sums += batch.size * np.array(
                [
                    float(loss),
                    float(terms.distance.mean()),
                    float(terms.confidence.mean()),
                ]
            )

        report = evaluate_estimator(
            model, held_out, bank, train_cfg.close_range
        )
        stats = EpochStats(epoch, *(sums / n), report.close_range_error)
        if not math.isfinite(stats.loss):
            raise TrainingDivergedError(epoch)
        _LOG.info(
            "epoch %d: loss %.5f, close-range error %.6f m",
            epoch,
            stats.loss,
            stats.close_range_error,
        )
        history.append(stats)
        if on_epoch:
            on_epoch(stats)
    return history


@dataclass(frozen=True)
class Checkpoint:
    """Model variant, dimensions and parameter tensors."""

    variant: str
    model_config: ModelConfig
    tensors: Dict[str, torch.Tensor]
    meta: Dict[str, Any]

    def build(self) -> Estimator:
        """Instantiate the model and load the tensors."""
        model = build_model(self.model_config, self.variant)
        model.load_state_dict(self.tensors)
        return model


class CheckpointFile:
    """Checkpoint file codec.

    Layout (little-endian):

        magic           8 bytes     b"DETVSCK\\0"
        version         u16
        reserved        u16
        header length   u32
        header          YAML text: variant, model configuration, metadata
        count           u32         number of tensors
        tensor:
            name length u16
            name        utf-8
            dtype       u8          0: float32, 1: float64
            ndim        u8
            shape       ndim x u32
            data        raw values, row-major
    """

    MAGIC = b"DETVSCK\x00"
    VERSION = 1

    _PREFIX = struct.Struct("<8sHHI")
    _DTYPE_CODES = {torch.float32: (0, "<f4"), torch.float64: (1, "<f8")}

    class Error(BaseException):
        """Failed to read or write a checkpoint file."""

    @classmethod
    def write(
        cls,
        path: str,
        model: Estimator,
        variant: str,
        meta: Optional[Dict[str, Any]] = None,
    ) -> str:
        """Write a checkpoint.

        Returns:
            Hex SHA-256 of the file content.

        Raises:
            CheckpointFile.Error: I/O error.
        """
        header = yaml.safe_dump(
            {
                "variant": variant,
                "model": asdict(model.cfg),
                "meta": meta or {},
            },
            sort_keys=True,
        ).encode("utf-8")
        chunks = [
            cls._PREFIX.pack(cls.MAGIC, cls.VERSION, 0, len(header)),
            header,
        ]
        state = model.state_dict()
        chunks.append(struct.pack("<I", len(state)))
        for name, tensor in state.items():
            code, np_dtype = cls._DTYPE_CODES[tensor.dtype]
            raw_name = name.encode("utf-8")
            chunks.append(struct.pack("<H", len(raw_name)) + raw_name)
            chunks.append(struct.pack("<BB", code, tensor.ndim))
            chunks.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            data = tensor.detach().cpu().contiguous().numpy()
            chunks.append(np.ascontiguousarray(data, np_dtype).tobytes())
        content = b"".join(chunks)
        try:
            with open(path, "wb") as f:
                f.write(content)
        except OSError as e:
            raise CheckpointFile.Error(f"{path}: {e.strerror}") from e
        _LOG.info("checkpoint: %s (%s)", path, variant)
        return hashlib.sha256(content).hexdigest()

    @classmethod
    def read(cls, path: str) -> Checkpoint:
        """Read a checkpoint.

        Raises:
            CheckpointFile.Error: I/O error, unsupported version,
              or corrupted content.
        """
        try:
            with open(path, "rb") as f:
                raw = f.read()
        except OSError as e:
            raise CheckpointFile.Error(f"{path}: {e.strerror}") from e

        codes = {
            code: (dt, np_dt) for dt, (code, np_dt) in cls._DTYPE_CODES.items()
        }
        try:
            magic, version, _, hlen = cls._PREFIX.unpack_from(raw)
            if magic != cls.MAGIC:
                raise CheckpointFile.Error(f"{path}: not a checkpoint file")
            if version != cls.VERSION:
                raise CheckpointFile.Error(
                    f"{path}: unsupported version {version}"
                )
            offset = cls._PREFIX.size
            header = yaml.safe_load(raw[offset : offset + hlen].decode("utf-8"))
            offset += hlen
            (count,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            tensors: Dict[str, torch.Tensor] = {}
            for _ in range(count):
                (nlen,) = struct.unpack_from("<H", raw, offset)
                offset += 2
                name = raw[offset : offset + nlen].decode("utf-8")
                offset += nlen
                code, ndim = struct.unpack_from("<BB", raw, offset)
                offset += 2
                shape = struct.unpack_from(f"<{ndim}I", raw, offset)
                offset += 4 * ndim
                dtype, np_dtype = codes[code]
                size = int(np.prod(shape, dtype=np.int64))
                data = np.frombuffer(raw, np_dtype, size, offset)
                offset += data.nbytes
                tensors[name] = torch.from_numpy(
                    data.reshape(shape).copy()
                ).to(dtype)
            model_config = ModelConfig(**header["model"])
            variant = str(header["variant"])
        except (
            struct.error,
            ValueError,
            KeyError,
            TypeError,
            yaml.YAMLError,
        ) as e:
            raise CheckpointFile.Error(
                f"{path}: truncated or corrupted: {e}"
            ) from e
        if offset != len(raw):
            raise CheckpointFile.Error(f"{path}: trailing bytes")
        meta = header.get("meta") or {}
        return Checkpoint(variant, model_config, tensors, meta)
