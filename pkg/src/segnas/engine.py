"""Search, derivation, retraining, and evaluation loops.

One search iteration: draw fresh Gumbel masks for every searched edge,
run the relaxed forward pass, form loss = CE + gamma*log(expected latency),
do a single backward sweep, then step the weight optimizer (SGD, cosine
schedule) and the architecture optimizer (Adam).  Depth logits stay frozen
(bitwise) until the warm-up epochs have elapsed.  Weights and architecture
parameters share one data stream by default; an optional bilevel mode
splits the training set 50/50 for ablations.

Everything is seeded through one master seed: parameter init, Gumbel
noise, batch order, and augmentation each get their own spawned stream,
so a (config, seed) pair pins the whole run.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .arch import DerivedArchitecture, DiscreteNetwork, HyperCellArch, derive, space_dict
from .config import ConfigError, SearchConfig
from .latency import LatencyModel, LatencyTable, total_loss
from .optim import Adam, SGDMomentum, cosine_lr, poly_lr
from .sampling import GumbelSampler, TemperatureSchedule, expected_mask
from .shapesworld import DatasetSpec, augment, generate, iou_counts, miou_from_counts
from .space import SuperNetwork
from .tensor import Tape, Tensor, TensorError

CHECKPOINT_VERSION = 1
TRAJECTORY_VERSION = 1

METRICS_COLUMNS = (
    "epoch", "lambda", "train_ce", "train_loss", "expected_latency_us",
    "depth_hc1", "depth_hc2", "depth_hc3",
    "expected_depth_hc1", "expected_depth_hc2", "expected_depth_hc3",
)


class SearchDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


# --------------------------------------------------------------------------
# Trajectory


@dataclass
class TrajectoryLog:
    config_hash: str
    records: list = field(default_factory=list)

    def append(self, record: dict) -> None:
        self.records.append(record)

    def to_dict(self) -> dict:
        return {"version": TRAJECTORY_VERSION, "config_hash": self.config_hash, "records": self.records}

    @classmethod
    def from_dict(cls, doc: dict) -> "TrajectoryLog":
        if doc.get("version") != TRAJECTORY_VERSION:
            raise TensorError(f"unsupported trajectory version {doc.get('version')!r}")
        return cls(doc["config_hash"], list(doc["records"]))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "TrajectoryLog":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def metrics_csv(self) -> str:
        lines = [",".join(METRICS_COLUMNS)]
        for r in self.records:
            row = [repr(r["epoch"]), repr(r["lambda"]), repr(r["train_ce"]), repr(r["train_loss"]),
                   repr(r["expected_latency_us"])]
            row += [repr(d) for d in r["depths"]]
            row += [repr(d) for d in r["expected_depths"]]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# Checkpoints


def _flatten_state(prefix: str, arrays: dict, out: dict) -> None:
    for name, arr in arrays.items():
        out[f"{prefix}/{name}"] = arr


def save_checkpoint(path, config: SearchConfig, snapshot: dict) -> Path:
    arrays: dict[str, np.ndarray] = {}
    _flatten_state("p", snapshot["params"], arrays)
    _flatten_state("wopt_v", snapshot["w_opt"]["velocity"], arrays)
    for tag in ("a_opt", "b_opt"):
        _flatten_state(f"{tag}_m", snapshot[tag]["m"], arrays)
        _flatten_state(f"{tag}_v", snapshot[tag]["v"], arrays)
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "epoch_next": snapshot["epoch_next"],
        "adam_t": {"a_opt": snapshot["a_opt"]["t"], "b_opt": snapshot["b_opt"]["t"]},
        "rng": snapshot["rng"],
        "trajectory": snapshot["trajectory"],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, _meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
    return path


def load_checkpoint(path):
    path = Path(path)
    try:
        with np.load(path) as z:
            arrays = {k: z[k] for k in z.files}
    except (OSError, ValueError, zipfile.BadZipFile) as e:
        raise TensorError(f"cannot read checkpoint {path}: {e}") from e
    if "_meta" not in arrays:
        raise TensorError(f"checkpoint {path} has no metadata record")
    meta = json.loads(bytes(arrays.pop("_meta")).decode())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise TensorError(f"unsupported checkpoint version {meta.get('version')!r}")
    snapshot = {"params": {}, "w_opt": {"velocity": {}},
                "a_opt": {"t": meta["adam_t"]["a_opt"], "m": {}, "v": {}},
                "b_opt": {"t": meta["adam_t"]["b_opt"], "m": {}, "v": {}},
                "epoch_next": int(meta["epoch_next"]), "rng": meta["rng"],
                "trajectory": meta["trajectory"]}
    for key, arr in arrays.items():
        group, name = key.split("/", 1)
        if group == "p":
            snapshot["params"][name] = arr
        elif group == "wopt_v":
            snapshot["w_opt"]["velocity"][name] = arr
        elif group in ("a_opt_m", "a_opt_v", "b_opt_m", "b_opt_v"):
            tag, kind = group[:5], group[6]
            snapshot[tag][kind][name] = arr
        else:
            raise TensorError(f"unknown checkpoint record {key!r}")
    config = SearchConfig.from_dict(meta["config"])
    return config, snapshot


# --------------------------------------------------------------------------
# Search


@dataclass
class SearchResult:
    config: SearchConfig
    network: SuperNetwork
    trajectory: TrajectoryLog
    checkpoint_path: Path | None = None

    def derive(self, provenance: dict | None = None) -> DerivedArchitecture:
        return derive(self.network, provenance)


def _train_batch(spec: DatasetSpec, indices, aug_rng):
    imgs, labs = [], []
    for i in indices:
        s = augment(generate(spec, "train", int(i)), aug_rng)
        imgs.append(s.image)
        labs.append(s.labels)
    return np.stack(imgs), np.stack(labs)


def _batched(indices, batch_size):
    for lo in range(0, len(indices), batch_size):
        yield indices[lo : lo + batch_size]


class _SearchState:
    """Everything that must round-trip through a checkpoint."""

    def __init__(self, config: SearchConfig, table: LatencyTable):
        self.config = config
        self.lat_model = LatencyModel(config, table)
        ss = np.random.SeedSequence(config.seed)
        s_params, s_gumbel, s_data, s_aug = ss.spawn(4)
        self.network = SuperNetwork(config, rng=np.random.Generator(np.random.PCG64(s_params)))
        self.sampler = GumbelSampler(s_gumbel, temperature=config.temp_initial)
        self.data_rng = np.random.Generator(np.random.PCG64(s_data))
        self.aug_rng = np.random.Generator(np.random.PCG64(s_aug))
        store = self.network.store
        beta_names = {f"hc{s + 1}.beta" for s in range(len(self.network.hyper_cells))}
        self.w_opt = SGDMomentum(store.items("weight"), config.weight_momentum, config.weight_weight_decay)
        arch_items = store.items("arch")
        self.a_opt = Adam([(n, t) for n, t in arch_items if n not in beta_names],
                          config.arch_lr, (config.arch_beta1, config.arch_beta2), config.arch_weight_decay)
        self.b_opt = Adam([(n, t) for n, t in arch_items if n in beta_names],
                          config.arch_lr, (config.arch_beta1, config.arch_beta2), config.arch_weight_decay)
        self.trajectory = TrajectoryLog(config.config_hash())
        self.epoch_next = 0

    def snapshot(self) -> dict:
        return {
            "params": self.network.store.state_arrays(),
            "w_opt": self.w_opt.state_dict(),
            "a_opt": self.a_opt.state_dict(),
            "b_opt": self.b_opt.state_dict(),
            "rng": {"sampler": self.sampler.state(),
                    "data": self.data_rng.bit_generator.state,
                    "aug": self.aug_rng.bit_generator.state},
            "epoch_next": self.epoch_next,
            "trajectory": self.trajectory.to_dict(),
        }

    def restore(self, snapshot: dict) -> None:
        self.network.store.load_state(snapshot["params"])
        self.w_opt.load_state_dict(snapshot["w_opt"])
        self.a_opt.load_state_dict(snapshot["a_opt"])
        self.b_opt.load_state_dict(snapshot["b_opt"])
        self.sampler.load_state(snapshot["rng"]["sampler"])
        self.data_rng.bit_generator.state = snapshot["rng"]["data"]
        self.aug_rng.bit_generator.state = snapshot["rng"]["aug"]
        self.epoch_next = int(snapshot["epoch_next"])
        self.trajectory = TrajectoryLog.from_dict(snapshot["trajectory"])


def search(config: SearchConfig, table: LatencyTable, out_dir=None,
           resume_from=None, epoch_callback=None, stop_after: int | None = None) -> SearchResult:
    """Run (or resume) the joint weight/architecture optimization.

    `stop_after` ends the session once that epoch index has completed
    (checkpointing as usual); resuming continues bit-identically to an
    uninterrupted run.
    """
    config.validate()
    state = _SearchState(config, table)
    if resume_from is not None:
        ck_config, snapshot = load_checkpoint(resume_from)
        if ck_config.config_hash() != config.config_hash():
            raise ConfigError(
                f"checkpoint config hash {ck_config.config_hash()} does not match current {config.config_hash()}"
            )
        state.restore(snapshot)

    spec = config.dataset
    if spec.train < 1:
        raise ConfigError("invalid config field 'dataset.train': search needs at least one training sample")
    schedule = TemperatureSchedule(config.temp_initial, config.temp_min, config.epochs)
    warmup = config.effective_warmup
    net, store = state.network, state.network.store
    beta_frozen = [hc.beta.data.copy() for hc in net.hyper_cells]
    last_good = state.snapshot()
    tape = Tape()

    def fail(message: str):
        ck = None
        if out_dir is not None:
            ck = save_checkpoint(Path(out_dir) / "last_good.npz", config, last_good)
        raise SearchDiverged(f"{message}; last good state at epoch {last_good['epoch_next']}", ck)

    def one_step(indices, update_weights: bool, update_arch: bool, epoch: int, stats):
        images, labels = _train_batch(spec, indices, state.aug_rng)
        x = Tensor(images)
        try:
            with tape:
                masks = net.sample_masks(state.sampler)
                logits = net.forward(x, masks, training=True)
                ce = nn.cross_entropy(logits, labels)
                lat = state.lat_model.expected(masks)
                loss = total_loss(ce, lat, config.gamma)
                if not np.isfinite(loss.data):
                    fail(f"non-finite loss at epoch {epoch}")
                tape.backward(loss)
        except TensorError as e:
            tape.clear()
            fail(f"numeric failure at epoch {epoch}: {e}")
        if update_weights:
            state.w_opt.step(cosine_lr(config.weight_lr_max, config.weight_lr_min, epoch, config.epochs))
        if update_arch:
            state.a_opt.step()
            if epoch >= warmup:
                state.b_opt.step()
        store.zero_grad()
        stats["ce"].append(ce.item())
        stats["loss"].append(loss.item())
        stats["lat"].append(lat.item())

    for epoch in range(state.epoch_next, config.epochs):
        lam = schedule.at(epoch)
        state.sampler.set_temperature(lam)
        stats = {"ce": [], "loss": [], "lat": []}
        if config.split_mode == "single":
            perm = state.data_rng.permutation(spec.train)
            for batch in _batched(perm, config.batch_size):
                one_step(batch, update_weights=True, update_arch=True, epoch=epoch, stats=stats)
        else:  # bilevel: disjoint halves for weight and architecture updates
            half = spec.train // 2
            w_perm = state.data_rng.permutation(half)
            a_perm = half + state.data_rng.permutation(spec.train - half)
            for w_batch, a_batch in zip(_batched(w_perm, config.batch_size),
                                        _batched(a_perm, config.batch_size)):
                one_step(w_batch, update_weights=True, update_arch=False, epoch=epoch, stats=stats)
                one_step(a_batch, update_weights=False, update_arch=True, epoch=epoch, stats=stats)

        if epoch < warmup:
            for frozen, hc in zip(beta_frozen, net.hyper_cells):
                if not np.array_equal(frozen, hc.beta.data):
                    raise TensorError("warm-up contract violated: depth logits changed during warm-up")

        depths = [int(np.argmax(hc.beta.data)) + 1 for hc in net.hyper_cells]
        exp_depths = [float(np.dot(np.arange(1, hc.beta.data.shape[0] + 1), expected_mask(hc.beta)))
                      for hc in net.hyper_cells]
        state.trajectory.append({
            "epoch": epoch,
            "lambda": lam,
            "train_ce": float(np.mean(stats["ce"])),
            "train_loss": float(np.mean(stats["loss"])),
            "expected_latency_us": float(np.mean(stats["lat"])),
            "depths": depths,
            "expected_depths": exp_depths,
        })
        state.epoch_next = epoch + 1
        last_good = state.snapshot()
        if epoch_callback is not None:
            epoch_callback(epoch, net)
        if stop_after is not None and epoch >= stop_after:
            break

    checkpoint_path = None
    if out_dir is not None:
        checkpoint_path = save_checkpoint(Path(out_dir) / "checkpoint.npz", config, state.snapshot())
    return SearchResult(config, net, state.trajectory, checkpoint_path)


def network_from_checkpoint(path) -> tuple[SearchConfig, SuperNetwork, TrajectoryLog]:
    config, snapshot = load_checkpoint(path)
    state = _SearchState(config, _empty_table_for(config))
    state.restore(snapshot)
    return config, state.network, state.trajectory


def _empty_table_for(config: SearchConfig) -> LatencyTable:
    # network_from_checkpoint only rebuilds parameters; give the latency
    # model a unit-cost table so no measurement is needed.
    from .latency import network_plan, plan_keys

    return LatencyTable({k: 1.0 for k in plan_keys(network_plan(config))}, {"synthetic": True})


# --------------------------------------------------------------------------
# Evaluation


def discrete_predictor(dnet: DiscreteNetwork):
    def predict(images: np.ndarray) -> np.ndarray:
        return dnet.forward(Tensor(images), training=False).data

    return predict


def supernet_hardmask_predictor(network: SuperNetwork, arch: DerivedArchitecture):
    def predict(images: np.ndarray) -> np.ndarray:
        return network.forward_discrete(Tensor(images), arch, training=False).data

    return predict


def evaluate_predictions(predict_fn, spec: DatasetSpec, split: str, batch_size: int = 8) -> dict:
    """mIoU and mean CE of a predictor over one full split."""
    n = spec.count(split)
    if n == 0:
        raise ConfigError(f"invalid config field 'dataset.{split}': split is empty")
    classes = spec.classes
    inter = np.zeros(classes, dtype=np.int64)
    union = np.zeros(classes, dtype=np.int64)
    ce_sum, pixels = 0.0, 0
    for lo in range(0, n, batch_size):
        idx = range(lo, min(lo + batch_size, n))
        images = np.stack([generate(spec, split, i).image for i in idx])
        labels = np.stack([generate(spec, split, i).labels for i in idx])
        logits = predict_fn(images)
        ce = nn.cross_entropy(Tensor(logits), labels)
        npix = labels.size
        ce_sum += ce.item() * npix
        pixels += npix
        pred = np.argmax(logits, axis=1)
        bi, bu = iou_counts(pred, labels, classes)
        inter += bi
        union += bu
    return {"miou": miou_from_counts(inter, union), "ce": ce_sum / pixels, "n_samples": n}


def evaluate_architecture(arch: DerivedArchitecture, dnet: DiscreteNetwork, config: SearchConfig,
                          split: str, table: LatencyTable | None = None) -> dict:
    metrics = evaluate_predictions(discrete_predictor(dnet), config.dataset, split, config.batch_size)
    metrics["depths"] = list(arch.depths())
    if table is not None:
        model = LatencyModel(config, table)
        metrics["latency_cells_us"] = model.discrete_cells_us(arch)
        metrics["latency_agg_us"] = model.discrete_agg_us(arch)
    return metrics


# --------------------------------------------------------------------------
# Retraining


def retrain(arch: DerivedArchitecture, config: SearchConfig, epochs: int | None = None,
            seed: int | None = None) -> dict:
    """Train a derived architecture from scratch; track the best val mIoU."""
    epochs = config.retrain_epochs if epochs is None else epochs
    seed = config.seed if seed is None else seed
    spec = config.dataset
    ss = np.random.SeedSequence([seed, 7])
    s_params, s_data, s_aug = ss.spawn(3)
    dnet = DiscreteNetwork(arch, rng=np.random.Generator(np.random.PCG64(s_params)))
    data_rng = np.random.Generator(np.random.PCG64(s_data))
    aug_rng = np.random.Generator(np.random.PCG64(s_aug))
    opt = SGDMomentum(dnet.store.items("weight"), config.retrain_momentum, config.retrain_weight_decay)
    tape = Tape()
    history = []
    best = None
    for epoch in range(epochs):
        lr = poly_lr(config.retrain_lr, config.retrain_power, epoch, epochs)
        ces = []
        for batch in _batched(data_rng.permutation(spec.train), config.batch_size):
            images, labels = _train_batch(spec, batch, aug_rng)
            with tape:
                logits = dnet.forward(Tensor(images), training=True)
                ce = nn.cross_entropy(logits, labels)
                if not np.isfinite(ce.data):
                    raise SearchDiverged(f"non-finite retrain loss at epoch {epoch}")
                tape.backward(ce)
            opt.step(lr)
            dnet.store.zero_grad()
            ces.append(ce.item())
        val = evaluate_predictions(discrete_predictor(dnet), spec, "val", config.batch_size)
        history.append({"epoch": epoch, "train_ce": float(np.mean(ces)), "val_miou": val["miou"]})
        best = val["miou"] if best is None else max(best, val["miou"])
    if best is None:  # zero-epoch budget: report the untrained network
        best = evaluate_predictions(discrete_predictor(dnet), spec, "val", config.batch_size)["miou"]
    return {"network": dnet, "best_val_miou": float(best), "history": history}


# --------------------------------------------------------------------------
# Random-search baseline


def sample_random_architecture(config: SearchConfig, rng: np.random.Generator) -> DerivedArchitecture:
    """Uniform op per edge and uniform depth per hyper-cell."""
    zero_idx = config.intra_ops.index("zero") if "zero" in config.intra_ops else None
    from .space import _node_sources

    n_edges = sum(len(s) for s in _node_sources(config.nodes_per_cell, config.cell_connectivity))

    def sample_ops():
        ops = []
        for _ in range(n_edges):
            idx = int(rng.integers(len(config.intra_ops)))
            ops.append(None if idx == zero_idx else idx)
        return ops

    hcs = []
    for s in range(3):
        n_normal = config.cells[s] - 1
        depth = int(rng.integers(1, n_normal + 2))
        hcs.append(HyperCellArch(
            depth=depth,
            n_initial=n_normal,
            reduction_ops=sample_ops(),
            normal_ops=sample_ops() if n_normal > 0 else None,
        ))
    agg_ops = [int(rng.integers(len(config.agg_ops))) for _ in range(7)]
    return DerivedArchitecture(hcs, agg_ops, space_dict(config),
                               {"config_hash": config.config_hash(), "seed": config.seed, "source": "random"})


def random_search_baseline(config: SearchConfig, table: LatencyTable, num_samples: int = 10,
                           seed: int | None = None, retrain_epochs: int | None = None) -> dict:
    """Retrain uniformly sampled architectures and report their spread."""
    seed = config.seed if seed is None else seed
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 23])))
    model = LatencyModel(config, table)
    samples = []
    for i in range(num_samples):
        arch = sample_random_architecture(config, rng)
        retrain_seed = int(rng.integers(2**31))
        result = retrain(arch, config, epochs=retrain_epochs, seed=retrain_seed)
        samples.append({
            "index": i,
            "arch": arch,
            "depths": list(arch.depths()),
            "miou": result["best_val_miou"],
            "latency_cells_us": model.discrete_cells_us(arch),
            "latency_agg_us": model.discrete_agg_us(arch),
        })
    mious = np.array([s["miou"] for s in samples])
    return {
        "samples": samples,
        "mean_miou": float(mious.mean()),
        "std_miou": float(mious.std(ddof=1)) if len(mious) > 1 else 0.0,
        "best_index": int(np.argmax(mious)),
    }
