"""
Training loop and run artifacts.

A run draws the dataset, initializes the encoder, optimizes the configured
loss with momentum SGD, then evaluates the final embeddings (metrics, linear
probe, collapse verdict). Free-table runs are transductive: every sample has
its own rows, the whole dataset is trained on, and the probe splits samples.
MLP runs train on the training split and are evaluated on the held-out split.
"""
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from imbalanced_supcon.config import RunConfig
from imbalanced_supcon.data import (LabeledDataset, ViewBatch, augment, generate_blobs,
                                    sample_batch, stratified_split_indices)
from imbalanced_supcon.encoder import (EncoderGrads, EncoderParams, backward, embed_samples,
                                       forward, init_near_collapsed, init_standard,
                                       load_checkpoint, save_checkpoint)
from imbalanced_supcon.errors import NumericalDivergence
from imbalanced_supcon.losses import LossOutput, PrototypePair, compute_loss
from imbalanced_supcon.metrics import MetricReport, full_report
from imbalanced_supcon.probe import ProbeResult, probe_protocol
from imbalanced_supcon.prototypes import place_prototypes
from imbalanced_supcon.sphere import (STREAM_AUGMENT, STREAM_BATCH, STREAM_DATA, STREAM_EVAL,
                                      STREAM_INIT, STREAM_LOSS, STREAM_PROBE, STREAM_SPLIT,
                                      EmbeddingBatch, RngStream)
from imbalanced_supcon.theory import (BoundEvaluation, CollapseVerdict, detect_collapse,
                                      measure_epsilon, verify_bound)
from imbalanced_supcon.utils import ResultsIO

logger = logging.getLogger(__name__)


class MomentumSGD:
    """
    SGD with momentum and weight decay, updating parameters in place.

    g <- g + weight_decay * p;  v <- momentum * v + g;  p <- p - lr * v
    """

    def __init__(self, params: EncoderParams, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(a) for a in params.arrays()]

    def step(self, params: EncoderParams, grads: EncoderGrads, lr: float):
        for p, g, v in zip(params.arrays(), grads.arrays, self.velocity):
            if self.weight_decay:
                g = g + self.weight_decay * p
            v *= self.momentum
            v += g
            p -= lr * v


def learning_rate(config: RunConfig, epoch: int) -> float:
    """lr for a 0-based epoch: constant, or linear warm-up followed by cosine decay"""
    opt = config.optimizer
    if opt.schedule == "constant":
        return opt.lr
    warmup = min(opt.warmup_epochs, opt.epochs)
    if epoch < warmup:
        start = opt.warmup_start_factor * opt.lr
        return start + (opt.lr - start) * epoch / warmup
    remaining = max(opt.epochs - warmup, 1)
    return 0.5 * opt.lr * (1.0 + math.cos(math.pi * (epoch - warmup) / remaining))


@dataclass
class RunData:
    """Dataset plus the sample split shared by training and evaluation"""
    dataset: LabeledDataset
    train_idx: np.ndarray
    test_idx: np.ndarray

    def training_set(self, backend: str) -> LabeledDataset:
        return self.dataset if backend == "free-table" else self.dataset.subset(self.train_idx)


def build_data(config: RunConfig) -> RunData:
    data = config.data
    ds = generate_blobs(data.n, data.imbalance, data.input_dim, data.separation, data.spread,
                        RngStream(config.seeds.data, STREAM_DATA), data.minority_label)
    train_idx, test_idx = stratified_split_indices(
        ds.labels, data.split_fraction, RngStream(config.seeds.data, STREAM_SPLIT))
    return RunData(ds, train_idx, test_idx)


def init_params(config: RunConfig, train_ds: LabeledDataset) -> EncoderParams:
    enc = config.encoder
    rng = RngStream(config.seeds.init, STREAM_INIT)
    kwargs = dict(n_samples=len(train_ds), input_dim=train_ds.input_dim,
                  hidden=enc.hidden, activation=enc.activation)
    if enc.init == "near-collapsed":
        reference = train_ds.inputs[:256] if enc.backend == "mlp" else None
        return init_near_collapsed(enc.backend, enc.eta, enc.dim, rng,
                                   reference_inputs=reference, **kwargs)
    return init_standard(enc.backend, enc.dim, rng, **kwargs)


@dataclass
class EvalView:
    """Embeddings of the evaluation views"""
    batch: ViewBatch
    embeddings: EmbeddingBatch


def evaluation_view(config: RunConfig, params: EncoderParams, run_data: RunData) -> EvalView:
    """
    Two views of every evaluation sample.

    free-table: every dataset sample's own two rows. mlp: the held-out
    samples, each augmented twice with the eval stream.
    """
    ds = run_data.dataset
    if params.backend == "free-table":
        batch = ViewBatch.layout(ds.labels, sample_ids=np.arange(len(ds)))
    else:
        held_out = ds.subset(run_data.test_idx)
        views = augment(np.repeat(held_out.inputs, 2, axis=0), config.data.aug_sigma,
                        RngStream(config.seeds.augment, STREAM_EVAL))
        batch = ViewBatch.layout(held_out.labels, views=views)
    return EvalView(batch=batch, embeddings=forward(params, batch))


def _probe_features(params: EncoderParams, run_data: RunData) -> Tuple[np.ndarray, ...]:
    ds = run_data.dataset
    if params.backend == "free-table":
        train_z = embed_samples(params, ds, run_data.train_idx).z
        test_z = embed_samples(params, ds, run_data.test_idx).z
    else:
        train_z = embed_samples(params, ds.subset(run_data.train_idx)).z
        test_z = embed_samples(params, ds.subset(run_data.test_idx)).z
    return (train_z, ds.labels[run_data.train_idx], test_z, ds.labels[run_data.test_idx])


def evaluate_embeddings(config: RunConfig, view: EvalView) -> MetricReport:
    rng = RngStream(config.seeds.augment, STREAM_EVAL) if config.metrics.tie_break == "random" else None
    return full_report(view.embeddings.z, view.batch.labels, view.batch.partner,
                       config.metrics.r_fraction, config.metrics.tie_break, rng)


def run_probe(config: RunConfig, params: EncoderParams, run_data: RunData) -> ProbeResult:
    probe = config.probe
    train_z, train_y, test_z, test_y = _probe_features(params, run_data)
    return probe_protocol(train_z, train_y, test_z, test_y, probe.subset_fraction,
                          RngStream(config.seeds.data, STREAM_PROBE), probe.epochs, probe.lr,
                          probe.optimizer, probe.momentum, probe.weight_decay,
                          probe.batch_size, probe.balance_test)


@dataclass
class RunRecord:
    """
    Outcome of one training run.

    to_dict() holds everything deterministic; wall_time and the in-memory
    artifacts (params, eval view, snapshot views) stay out of it.
    """
    run_id: str
    config: Dict[str, Any]
    epochs: List[Dict[str, Any]]
    metrics: MetricReport
    probe: ProbeResult
    collapse: CollapseVerdict
    bound: Optional[BoundEvaluation] = None
    empty_class_events: int = 0
    snapshots: List[Dict[str, Any]] = field(default_factory=list)
    snapshot_views: List[Tuple[int, EvalView]] = field(default_factory=list)
    prototypes: Optional[PrototypePair] = None
    wall_time: float = 0.0
    params: Optional[EncoderParams] = None
    eval_view: Optional[EvalView] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "run_id": self.run_id,
            "config": self.config,
            "epochs": self.epochs,
            "metrics": self.metrics.to_dict(),
            "probe": self.probe.to_dict(),
            "collapse": self.collapse.to_dict(),
            "bound": self.bound.to_dict() if self.bound is not None else None,
            "empty_class_events": self.empty_class_events,
            "snapshots": self.snapshots,
            "prototypes": self.prototypes.to_dict() if self.prototypes is not None else None,
        }

    @property
    def grad_norms(self) -> List[float]:
        return [e["grad_norm"] for e in self.epochs]


def _class_mean(values: np.ndarray, mask: np.ndarray) -> Optional[float]:
    return float(np.mean(values[mask])) if np.any(mask) else None


def _mean_or_none(values: List[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


class Trainer:
    """Runs one RunConfig end to end"""

    def __init__(self, config: RunConfig):
        self.config = config.validate()
        self.run_data = build_data(config)
        self.train_ds = self.run_data.training_set(config.encoder.backend)
        self.params = init_params(config, self.train_ds)
        self.optimizer = MomentumSGD(self.params, config.optimizer.momentum,
                                     config.optimizer.weight_decay)
        self.batch_rng = RngStream(config.seeds.batch, STREAM_BATCH)
        self.augment_rng = RngStream(config.seeds.augment, STREAM_AUGMENT)
        self.loss_rng = RngStream(config.seeds.batch, STREAM_LOSS)
        self.prototypes: Optional[PrototypePair] = None
        self.bound: Optional[BoundEvaluation] = None
        self.empty_class_events = 0

    @property
    def minority_label(self) -> int:
        return self.train_ds.minority_label

    def _place_prototypes(self):
        loss = self.config.loss
        if loss.kind in ("sup-prototypes", "tsc-lite"):
            self.prototypes = place_prototypes(
                self.params, self.train_ds, loss.prototype_step, loss.prototype_iters,
                RngStream(self.config.seeds.init, STREAM_INIT), loss.prototype_source)

    def draw_batch(self) -> ViewBatch:
        opt = self.config.optimizer
        return sample_batch(self.train_ds, opt.batch_size, opt.sampler, self.batch_rng,
                            self.config.data.aug_sigma, self.augment_rng)

    def _step(self, batch: ViewBatch, lr: float, epoch: int, step: int) -> Tuple[LossOutput, float]:
        embeddings = forward(self.params, batch)
        if epoch == 0 and step == 0 and self.config.evaluate_bound:
            self.bound = verify_bound(embeddings, batch.labels, self.config.loss.tau,
                                      self.config.metrics.epsilon_max)
        out = compute_loss(self.config.loss, embeddings, batch, self.minority_label,
                           self.prototypes, self.loss_rng)
        if not np.isfinite(out.value) or not np.all(np.isfinite(out.grad_w)):
            raise NumericalDivergence(
                f"non-finite loss at epoch {epoch + 1}, step {step}",
                dump={
                    "epoch": epoch + 1,
                    "step": step,
                    "loss": repr(out.value),
                    "sample_ids": batch.sample_ids.tolist(),
                    "labels": batch.labels.tolist(),
                },
            )
        self.optimizer.step(self.params, backward(self.params, batch, out.grad_w), lr)
        return out, measure_epsilon(embeddings.z)

    def _epoch(self, epoch: int) -> Dict[str, Any]:
        lr = learning_rate(self.config, epoch)
        steps = max(1, len(self.train_ds) // self.config.optimizer.batch_size)
        losses, norms, norms_maj, norms_min, epsilons = [], [], [], [], []
        empty_events = 0
        for step in range(steps):
            batch = self.draw_batch()
            out, epsilon = self._step(batch, lr, epoch, step)
            anchor_norms = np.linalg.norm(out.anchor_grad_w, axis=1)
            anchors = out.is_anchor
            is_minority = batch.labels == self.minority_label
            losses.append(out.value)
            norms.append(float(np.mean(anchor_norms[anchors])))
            norms_maj.append(_class_mean(anchor_norms, anchors & ~is_minority))
            norms_min.append(_class_mean(anchor_norms, anchors & is_minority))
            epsilons.append(epsilon)
            if self.minority_label in out.empty_classes:
                empty_events += 1
        self.empty_class_events += empty_events
        record = {
            "epoch": epoch + 1,
            "lr": lr,
            "loss": float(np.mean(losses)),
            "grad_norm": float(np.mean(norms)),
            "grad_norm_majority": _mean_or_none(norms_maj),
            "grad_norm_minority": _mean_or_none(norms_min),
            "epsilon": float(np.mean(epsilons)),
            "empty_class_events": empty_events,
        }
        logger.info("epoch %d: loss %.5f, grad norm %.4e, epsilon %.4f",
                    record["epoch"], record["loss"], record["grad_norm"], record["epsilon"])
        return record

    def run(self) -> RunRecord:
        config = self.config
        started = time.perf_counter()
        self._place_prototypes()

        epochs, snapshots, snapshot_views = [], [], []
        refresh = config.optimizer.prototype_refresh
        eval_every = config.metrics.eval_every
        for epoch in range(config.optimizer.epochs):
            epochs.append(self._epoch(epoch))
            if refresh and (epoch + 1) % refresh == 0:
                self._place_prototypes()
            if eval_every and (epoch + 1) % eval_every == 0:
                view = evaluation_view(config, self.params, self.run_data)
                snapshots.append({"epoch": epoch + 1,
                                  **evaluate_embeddings(config, view).to_dict()})
                snapshot_views.append((epoch + 1, view))

        if self.empty_class_events:
            logger.warning("%d batches had no minority anchors", self.empty_class_events)

        view = evaluation_view(config, self.params, self.run_data)
        metrics = evaluate_embeddings(config, view)
        probe = run_probe(config, self.params, self.run_data)
        grad_norms = [e["grad_norm"] for e in epochs]
        return RunRecord(
            run_id=config.run_id,
            config=config.body(),
            epochs=epochs,
            metrics=metrics,
            probe=probe,
            collapse=detect_collapse(metrics, grad_norms),
            bound=self.bound,
            empty_class_events=self.empty_class_events,
            snapshots=snapshots,
            snapshot_views=snapshot_views,
            prototypes=self.prototypes,
            wall_time=time.perf_counter() - started,
            params=self.params,
            eval_view=view,
        )


def train(config: RunConfig) -> RunRecord:
    """Run one configuration end to end; bit-reproducible given the config"""
    return Trainer(config).run()


def write_run(record: RunRecord, out_dir: Union[str, Path]) -> Path:
    """
    Persist a run under <out_dir>/<run_id>/.

    Files: config.json, record.json, metrics.json, embeddings.csv,
    checkpoint.json and timing.json (wall time kept out of record.json), plus
    snapshots/embeddings_epoch_NNNN.csv for every mid-run evaluation.
    """
    run_dir = Path(out_dir) / record.run_id
    ResultsIO.save_json(record.config, run_dir / "config.json")
    ResultsIO.save_json(record.to_dict(), run_dir / "record.json")
    ResultsIO.save_json(record.metrics.to_dict(), run_dir / "metrics.json")
    if record.eval_view is not None:
        view = record.eval_view
        ResultsIO.write_embeddings_csv(run_dir / "embeddings.csv", view.embeddings.z,
                                       view.batch.sample_ids, view.batch.labels)
    for epoch, view in record.snapshot_views:
        ResultsIO.write_embeddings_csv(run_dir / "snapshots" / f"embeddings_epoch_{epoch:04d}.csv",
                                       view.embeddings.z, view.batch.sample_ids, view.batch.labels)
    if record.params is not None:
        save_checkpoint(record.params, run_dir / "checkpoint.json")
    ResultsIO.save_json({"wall_time_seconds": record.wall_time}, run_dir / "timing.json")
    return run_dir


def export_embeddings(run_dir: Union[str, Path], output: Optional[Union[str, Path]] = None) -> Path:
    """Rebuild a run's evaluation views from config.json + checkpoint.json and write them"""
    run_dir = Path(run_dir)
    config = RunConfig.from_dict(ResultsIO.load_json(run_dir / "config.json"))
    params = load_checkpoint(run_dir / "checkpoint.json")
    view = evaluation_view(config, params, build_data(config))
    target = Path(output) if output else run_dir / "embeddings.csv"
    return ResultsIO.write_embeddings_csv(target, view.embeddings.z, view.batch.sample_ids,
                                          view.batch.labels)
