"""Unrolled Newton-type reconstruction network.

Each unit block computes

    g = -a * grad U(f | y)          (Poisson data-fidelity gradient, fixed)
    r = reg_net(f)                  (learned regularizer term)
    f_next = f + newton_net(g + r)  (learned Newton step)

and a model chains ``n_blocks`` such blocks.  The chain starts from one
gradient step away from the count-matched uniform image (``initial_estimate``),
which for uniform sensitivity is exactly the first MLEM iterate.  Training
backpropagates through the fidelity gradient as well as through both networks.

The operator scale ``a`` defaults to the inverse mean pixel sensitivity, which
turns ``g`` into the dimensionless EM ratio ``A^T(y/ybar)/s - 1`` (for uniform
sensitivity ``s``) and keeps network inputs O(1).
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import fileio
from .nn import AdamState, ResNetOperator, adam_step, mse_loss
from .objective import DEFAULT, ObjectiveConfig, grad_neg_loglik, grad_neg_loglik_vjp
from .phantom import RandomizationLimits, render_phantom, sample_random_phantom
from .tomo import (Geometry, SystemMatrix, build_system_matrix, forward_project,
                   sample_poisson, scale_to_counts)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "dnrecon-checkpoint"
MANIFEST = "manifest.json"
PAYLOAD = "weights.bin"


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    n_blocks: int = 6
    channels: int = 32
    res_blocks: int = 2
    slope: float = 0.01
    bn_momentum: float = 0.9
    seed: int = 0
    operator_scale: float | None = None
    zero_init_step: bool = True

    def __post_init__(self):
        if self.n_blocks < 1 or self.channels < 1 or self.res_blocks < 0:
            raise ValueError("n_blocks and channels must be >= 1")
        if self.operator_scale is not None and not self.operator_scale > 0:
            raise ValueError("operator_scale must be positive")


# Guard on expected counts inside the network; a near-zero floor lets rays whose
# pixels are all clamped produce y / 1e-12 sized inputs.
MODEL_OBJECTIVE = ObjectiveConfig(eps_y=1.0)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 4
    dataset_size: int = 300
    split: float = 0.9
    seed: int = 0
    total_counts: float = 1e5
    n: int = 64
    views: int = 24
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.split < 1:
            raise ValueError("split must lie in (0, 1)")
        if self.epochs < 0 or self.dataset_size < 1:
            raise ValueError("epochs must be >= 0 and dataset_size >= 1")
        if not self.total_counts > 0:
            raise ValueError("total_counts must be positive")


@dataclass
class UnitBlock:
    reg_net: ResNetOperator
    newton_net: ResNetOperator


def fidelity_step(f, y, A: SystemMatrix, cfg: ObjectiveConfig = DEFAULT,
                  scale: float = 1.0) -> np.ndarray:
    """The fixed linear-operator output ``-scale * grad U(f | y)`` in double precision."""
    return -scale * grad_neg_loglik(f, y, A, cfg)


def default_operator_scale(A: SystemMatrix) -> float:
    return A.shape[1] / float(A.col_sums.sum())


def init_input(y, A: SystemMatrix, cfg: ObjectiveConfig = DEFAULT,
               scale: float = 1.0) -> np.ndarray:
    """Fidelity step at the uniform image whose projection matches the total counts.

    An all-zero sinogram falls back to the unit uniform image.
    """
    y = np.asarray(y, dtype=np.float64)
    total_sens = float(A.col_sums.sum())
    if total_sens <= 0:
        raise ValueError("system matrix has zero sensitivity")
    totals = y.sum(axis=(-2, -1))
    level = np.where(totals > 0, totals / total_sens, 1.0)
    uniform = np.ones(y.shape[:-2] + A.geometry.image_shape) * level[..., None, None]
    return fidelity_step(uniform, y, A, cfg, scale)


def initial_estimate(y, A: SystemMatrix, cfg: ObjectiveConfig = DEFAULT) -> np.ndarray:
    """``u - (c / mean_s) * grad U(u | y)`` with ``u = c * 1`` the count-matched uniform image.

    Equivalent to ``u + init_input(y, A, cfg, scale=c / mean_s)``.  Unlike the
    bare fidelity step this is an image in activity units, so the first block
    evaluates the Poisson gradient at a sensible, mostly positive iterate.
    """
    y = np.asarray(y, dtype=np.float64)
    total_sens = float(A.col_sums.sum())
    totals = y.sum(axis=(-2, -1))
    level = np.where(totals > 0, totals / total_sens, 1.0)[..., None, None]
    mean_sens = total_sens / A.shape[1]
    return level + init_input(y, A, cfg) * (level / mean_sens)


def block_forward(block: UnitBlock, f_in, y, A: SystemMatrix,
                  cfg: ObjectiveConfig = DEFAULT, training: bool = False,
                  scale: float = 1.0):
    """One unrolled iteration on a batch ``(B, N, N)``; returns ``(f_out, cache)``."""
    dtype = block.newton_net.project.weight.dtype
    f_in = np.asarray(f_in)
    if f_in.shape[-2:] != A.geometry.image_shape:
        raise ValueError(f"image shape {f_in.shape[-2:]} does not match geometry")
    g = fidelity_step(f_in, y, A, cfg, scale).astype(dtype)
    r, cache_r = block.reg_net.forward(f_in[:, None].astype(dtype, copy=False), training)
    d, cache_d = block.newton_net.forward(g[:, None] + r, training)
    return f_in + d[:, 0], (f_in, cache_r, cache_d)


def block_backward(block: UnitBlock, cache, grad_out, y, A: SystemMatrix,
                   cfg: ObjectiveConfig = DEFAULT, scale: float = 1.0) -> np.ndarray:
    f_in, cache_r, cache_d = cache
    grad_u = block.newton_net.backward(cache_d, grad_out[:, None])
    grad_f = grad_out + block.reg_net.backward(cache_r, grad_u)[:, 0]
    # d(-scale * grad U)/df transposed, applied to the upstream gradient
    vjp = grad_neg_loglik_vjp(f_in, y, A, grad_u[:, 0], cfg)
    return grad_f - (scale * vjp).astype(grad_f.dtype)


class DnrNetModel:
    def __init__(self, A: SystemMatrix, net: NetworkConfig = NetworkConfig(),
                 objective: ObjectiveConfig = MODEL_OBJECTIVE, dtype=np.float32):
        self.A = A
        self.net = net
        self.objective = objective
        self.dtype = np.dtype(dtype)
        self.scale = (default_operator_scale(A) if net.operator_scale is None
                      else float(net.operator_scale))
        rng = np.random.default_rng(net.seed)
        kw = dict(channels=net.channels, n_res_blocks=net.res_blocks, slope=net.slope,
                  bn_momentum=net.bn_momentum, dtype=self.dtype)
        self.blocks = [UnitBlock(ResNetOperator(rng=rng, **kw), ResNetOperator(rng=rng, **kw))
                       for _ in range(net.n_blocks)]
        if net.zero_init_step:
            # every block starts as the identity map
            for b in self.blocks:
                b.newton_net.project.params["weight"][...] = 0

    @property
    def geometry(self) -> Geometry:
        return self.A.geometry

    def _nets(self):
        for i, b in enumerate(self.blocks):
            yield f"block{i}.reg", b.reg_net
            yield f"block{i}.newton", b.newton_net

    def named_tensors(self):
        for prefix, net in self._nets():
            yield from net.named_tensors(prefix + ".")

    def named_parameters(self):
        for prefix, net in self._nets():
            yield from net.named_parameters(prefix + ".")

    def zero_grad(self) -> None:
        for _, net in self._nets():
            net.zero_grad()

    def _check_sinogram(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if y.shape[-2:] != self.geometry.sinogram_shape:
            raise ValueError(f"sinogram shape {y.shape[-2:]} does not match model geometry "
                             f"{self.geometry.sinogram_shape}")
        if np.any(y < 0):
            raise ValueError("sinogram counts must be nonnegative")
        return y

    def forward(self, y, training: bool = False):
        """Batch forward pass ``(B, V, D) -> (B, N, N)`` with caches for ``backward``."""
        y = self._check_sinogram(y)
        f = initial_estimate(y, self.A, self.objective).astype(self.dtype)
        caches = []
        for block in self.blocks:
            f, c = block_forward(block, f, y, self.A, self.objective, training, self.scale)
            caches.append(c)
        return f, (y, caches)

    def backward(self, cache, grad_out) -> np.ndarray:
        """Accumulate parameter gradients; returns the gradient w.r.t. the initial image."""
        y, caches = cache
        g = np.asarray(grad_out, dtype=self.dtype)
        for block, c in zip(reversed(self.blocks), reversed(caches)):
            g = block_backward(block, c, g, y, self.A, self.objective, self.scale)
        return g


def reconstruct(model: DnrNetModel, y, training: bool = False) -> np.ndarray:
    """Map one sinogram ``(V, D)`` or a batch ``(B, V, D)`` to images."""
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 2
    out, _ = model.forward(y[None] if single else y, training)
    return out[0] if single else out


# -- data --------------------------------------------------------------------


@dataclass
class Dataset:
    images: np.ndarray
    sinograms: np.ndarray
    seeds: np.ndarray
    geometry: Geometry
    total_counts: float

    def __len__(self) -> int:
        return len(self.images)

    def split(self, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
        """Shuffled train/validation indices; both sides nonempty when possible."""
        size = len(self)
        order = np.random.default_rng(seed).permutation(size)
        n_train = int(round(fraction * size))
        if size >= 2:
            n_train = min(max(n_train, 1), size - 1)
        else:
            n_train = size
        return np.sort(order[:n_train]), np.sort(order[n_train:])

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        meta = {"geometry": self.geometry.to_dict(), "total_counts": self.total_counts,
                "size": len(self)}
        (out / "dataset.json").write_text(json.dumps(meta, indent=2) + "\n")
        with open(out / "manifest.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "seed", "image_file", "sinogram_file"])
            for i, seed in enumerate(self.seeds):
                img_name, sino_name = f"sample_{i:05d}_image.csv", f"sample_{i:05d}_sinogram.csv"
                fileio.write_image_csv(out / img_name, self.images[i])
                fileio.write_sinogram_csv(out / sino_name, self.sinograms[i])
                w.writerow([i, int(seed), img_name, sino_name])

    @classmethod
    def load(cls, in_dir, limit: int | None = None) -> Dataset:
        src = Path(in_dir)
        meta = json.loads((src / "dataset.json").read_text())
        geom = Geometry(**meta["geometry"])
        images, sinos, seeds = [], [], []
        with open(src / "manifest.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                if limit is not None and len(seeds) >= limit:
                    break
                images.append(fileio.read_csv(src / row["image_file"]))
                sinos.append(fileio.read_csv(src / row["sinogram_file"]))
                seeds.append(int(row["seed"]))
        if not seeds:
            raise ValueError(f"{src}: dataset is empty")
        return cls(np.stack(images), np.stack(sinos), np.asarray(seeds, dtype=np.int64),
                   geom, float(meta["total_counts"]))


def sample_seeds(seed: int, size: int) -> np.ndarray:
    return np.random.SeedSequence(seed).generate_state(size, dtype=np.uint32).astype(np.int64)


def simulate_sample(spec_seed: int, limits: RandomizationLimits, A: SystemMatrix,
                    total_counts: float) -> tuple[np.ndarray, np.ndarray]:
    spec = sample_random_phantom(limits, spec_seed, A.geometry.n)
    truth = scale_to_counts(render_phantom(spec), A, total_counts)
    return truth, sample_poisson(forward_project(A, truth), spec_seed)


def generate_dataset(limits: RandomizationLimits, cfg: TrainConfig, A: SystemMatrix,
                     out_dir=None) -> Dataset:
    seeds = sample_seeds(cfg.seed, cfg.dataset_size)
    pairs = [simulate_sample(int(s), limits, A, cfg.total_counts) for s in seeds]
    ds = Dataset(np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]),
                 seeds, A.geometry, float(cfg.total_counts))
    if out_dir is not None:
        ds.save(out_dir)
    return ds


# -- training ----------------------------------------------------------------


@dataclass
class TrainingReport:
    rows: list[dict] = field(default_factory=list)

    @property
    def initial_val_loss(self) -> float:
        return self.rows[0]["val_loss"]

    @property
    def final_val_loss(self) -> float:
        return self.rows[-1]["val_loss"]

    @property
    def initial_train_loss(self) -> float:
        return self.rows[0]["train_loss"]

    @property
    def final_train_loss(self) -> float:
        return self.rows[-1]["train_loss"]

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss"])
            for r in self.rows:
                w.writerow([r["epoch"], repr(r["train_loss"]), repr(r["val_loss"])])

    @classmethod
    def read(cls, path) -> TrainingReport:
        with open(path, newline="") as fh:
            rows = [{"epoch": int(r["epoch"]), "train_loss": float(r["train_loss"]),
                     "val_loss": float(r["val_loss"])} for r in csv.DictReader(fh)]
        return cls(rows)


def evaluate(model: DnrNetModel, images, sinograms, batch_size: int = 8,
             training: bool = False) -> float:
    """Mean per-image MSE.  Training-mode evaluation leaves BN running stats untouched."""
    if len(images) == 0:
        return float("nan")
    saved = [b.copy() for _, b in model.named_tensors()] if training else None
    total = 0.0
    for start in range(0, len(images), batch_size):
        y = sinograms[start:start + batch_size]
        pred, _ = model.forward(y, training)
        loss, _ = mse_loss(pred.astype(np.float64), images[start:start + batch_size])
        total += loss * len(y)
    if saved is not None:
        for (_, b), s in zip(model.named_tensors(), saved):
            b[...] = s
    return total / len(images)


def train(model: DnrNetModel, dataset: Dataset, cfg: TrainConfig,
          on_epoch=None) -> TrainingReport:
    """Adam on the batch-mean image MSE over the training split.

    Row 0 of the report holds the losses before any update: training split in
    training mode (running stats restored afterwards), validation split in
    evaluation mode.  Later rows hold the mean minibatch loss of each epoch and
    the evaluation-mode validation loss after it.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if dataset.geometry.sinogram_shape != model.geometry.sinogram_shape:
        raise ValueError("dataset geometry does not match the model")
    train_idx, val_idx = dataset.split(cfg.split, cfg.seed)
    x_tr, y_tr = dataset.images[train_idx], dataset.sinograms[train_idx]
    x_va, y_va = dataset.images[val_idx], dataset.sinograms[val_idx]

    report = TrainingReport()
    report.rows.append({"epoch": 0,
                        "train_loss": evaluate(model, x_tr, y_tr, training=True),
                        "val_loss": evaluate(model, x_va, y_va)})
    if on_epoch:
        on_epoch(report.rows[-1])

    params, grads = [], []
    for _, p, g in model.named_parameters():
        params.append(p)
        grads.append(g)
    state = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    rng = np.random.default_rng(cfg.seed)

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_idx))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            model.zero_grad()
            pred, cache = model.forward(y_tr[batch], training=True)
            loss, grad = mse_loss(pred, x_tr[batch].astype(model.dtype))
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}")
            model.backward(cache, grad)
            adam_step(state, params, grads)
            losses.append(loss * len(batch))
        row = {"epoch": epoch, "train_loss": float(np.sum(losses) / len(order)),
               "val_loss": evaluate(model, x_va, y_va)}
        if not np.isfinite(row["val_loss"]) and len(val_idx):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        report.rows.append(row)
        log.info("epoch %d train %.6g val %.6g (%.1fs)", epoch, row["train_loss"],
                 row["val_loss"], time.perf_counter() - t0)
        if on_epoch:
            on_epoch(row)
    return report


# -- checkpoints -------------------------------------------------------------


def save_model(model: DnrNetModel, path) -> None:
    """Write ``manifest.json`` plus a little-endian float32 ``weights.bin`` into ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    tensors, chunks, offset = [], [], 0
    for name, arr in model.named_tensors():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "dtype": "float32-le",
        "geometry": model.geometry.to_dict(),
        "network": asdict(model.net),
        "objective": asdict(model.objective),
        "payload": PAYLOAD,
        "payload_bytes": offset,
        "tensors": tensors,
    }
    (out / PAYLOAD).write_bytes(b"".join(chunks))
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")


def load_model(path, A: SystemMatrix | None = None) -> DnrNetModel:
    src = Path(path)
    try:
        manifest = json.loads((src / MANIFEST).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{src}: unreadable manifest ({exc})") from None
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{src}: not a {CHECKPOINT_FORMAT} manifest")
    try:
        geom = Geometry(**manifest["geometry"])
        net = NetworkConfig(**manifest["network"])
        objective = ObjectiveConfig(**manifest["objective"])
        entries = manifest["tensors"]
        expected_bytes = int(manifest["payload_bytes"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{src}: malformed manifest ({exc})") from None
    if A is None:
        A = build_system_matrix(geom)
    elif A.geometry != geom:
        raise CheckpointError(f"{src}: checkpoint geometry {geom} does not match {A.geometry}")
    payload = (src / manifest.get("payload", PAYLOAD)).read_bytes()
    if len(payload) != expected_bytes:
        raise CheckpointError(f"{src}: payload is {len(payload)} bytes, "
                              f"manifest declares {expected_bytes}")

    model = DnrNetModel(A, net, objective, dtype=np.float32)
    targets = list(model.named_tensors())
    if len(targets) != len(entries):
        raise CheckpointError(f"{src}: manifest lists {len(entries)} tensors, "
                              f"architecture has {len(targets)}")
    for (name, arr), entry in zip(targets, entries):
        if entry["name"] != name or tuple(entry["shape"]) != arr.shape:
            raise CheckpointError(f"{src}: tensor {entry['name']} {entry['shape']} does not "
                                  f"match {name} {list(arr.shape)}")
        start, nbytes = int(entry["offset"]), int(entry["nbytes"])
        if nbytes != arr.size * 4 or start < 0 or start + nbytes > len(payload):
            raise CheckpointError(f"{src}: tensor {name} lies outside the payload")
        arr[...] = np.frombuffer(payload, dtype="<f4", count=arr.size, offset=start).reshape(arr.shape)
    return model
