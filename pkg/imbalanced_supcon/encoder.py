"""
Encoders mapping views to pre-normalization vectors w, with analytic backward.

Two backends:
    free-table  one trainable row per view (row 2*sample_id + view_index)
    mlp         dense layers with tanh/linear activations, final width d

Parameters are mutated in place by the trainer's optimizer; forward and
backward never mutate them.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from imbalanced_supcon.data import LabeledDataset, ViewBatch
from imbalanced_supcon.errors import InitFailed, InvalidConfig
from imbalanced_supcon.sphere import EmbeddingBatch, RngStream, mean_cosine, normalize_rows

logger = logging.getLogger(__name__)

BACKENDS = ("free-table", "mlp")
ACTIVATIONS = ("tanh", "linear")
MIN_COLLAPSED_COSINE = 0.99
# central differences are trusted down to ROUNDOFF_FACTOR * eps * |f| / h
ROUNDOFF_FACTOR = 100.0


@dataclass
class DenseLayer:
    """y = activation(x @ weights + bias); weights are [fan_in, fan_out]"""
    weights: np.ndarray
    bias: np.ndarray
    activation: str = "tanh"


@dataclass
class EncoderParams:
    """
    Trainable encoder state.

    Attributes:
        backend: free-table or mlp
        table: [num_views, d] rows for the free-table backend
        layers: DenseLayer list for the mlp backend
    """
    backend: str
    table: Optional[np.ndarray] = None
    layers: List[DenseLayer] = field(default_factory=list)

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise InvalidConfig(f"unknown encoder backend '{self.backend}'")
        if self.backend == "free-table" and self.table is None:
            raise InvalidConfig("free-table backend needs a table")
        if self.backend == "mlp":
            if not self.layers:
                raise InvalidConfig("mlp backend needs at least one layer")
            for prev, layer in zip(self.layers, self.layers[1:]):
                if prev.weights.shape[1] != layer.weights.shape[0]:
                    raise InvalidConfig("mlp layer shapes do not chain")
            for layer in self.layers:
                if layer.activation not in ACTIVATIONS:
                    raise InvalidConfig(f"unknown activation '{layer.activation}'")
                if layer.bias.shape != (layer.weights.shape[1],):
                    raise InvalidConfig("bias width does not match weights")

    @property
    def output_dim(self) -> int:
        if self.backend == "free-table":
            return self.table.shape[1]
        return self.layers[-1].weights.shape[1]

    @property
    def input_dim(self) -> Optional[int]:
        return None if self.backend == "free-table" else self.layers[0].weights.shape[0]

    def arrays(self) -> List[np.ndarray]:
        """Parameter arrays in a fixed order (shared with EncoderGrads.arrays)"""
        if self.backend == "free-table":
            return [self.table]
        out = []
        for layer in self.layers:
            out.extend([layer.weights, layer.bias])
        return out

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            backend=self.backend,
            table=None if self.table is None else self.table.copy(),
            layers=[DenseLayer(l.weights.copy(), l.bias.copy(), l.activation)
                    for l in self.layers],
        )


@dataclass
class EncoderGrads:
    """Gradients matching EncoderParams.arrays() one-to-one"""
    arrays: List[np.ndarray]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays])


@dataclass
class GradCheckReport:
    max_relative_error: float
    n_checked: int
    step: float
    max_abs_error: float = 0.0
    noise_floor: float = 0.0

    def to_dict(self):
        return {
            "max_relative_error": self.max_relative_error,
            "max_abs_error": self.max_abs_error,
            "noise_floor": self.noise_floor,
            "n_checked": self.n_checked,
            "step": self.step,
        }


def _activate(a: np.ndarray, activation: str) -> np.ndarray:
    return np.tanh(a) if activation == "tanh" else a


def _mlp_forward(layers: Sequence[DenseLayer], x: np.ndarray):
    # memory keeps each layer input and output for backprop
    memory = []
    h = x
    for layer in layers:
        out = _activate(h @ layer.weights + layer.bias, layer.activation)
        memory.append((h, out))
        h = out
    return h, memory


def encode_inputs(params: EncoderParams, inputs: np.ndarray) -> np.ndarray:
    """Raw mlp outputs w for an input matrix"""
    if params.backend != "mlp":
        raise InvalidConfig("encode_inputs needs the mlp backend")
    w, _ = _mlp_forward(params.layers, np.asarray(inputs, dtype=np.float64))
    return w


def forward(params: EncoderParams, batch: ViewBatch) -> EmbeddingBatch:
    """
    Encode every view of a batch.

    The free-table backend ignores view content and returns the view's own
    row; the mlp backend encodes batch.views.

    Raises:
        DegenerateVector: if any w has (near) zero norm
    """
    if params.backend == "free-table":
        rows = batch.table_rows
        if rows.max(initial=-1) >= params.table.shape[0]:
            raise InvalidConfig("batch references rows beyond the free table")
        return normalize_rows(params.table[rows])
    if batch.views is None:
        raise InvalidConfig("mlp backend needs view inputs")
    return normalize_rows(encode_inputs(params, batch.views))


def backward(params: EncoderParams, batch: ViewBatch, upstream: np.ndarray) -> EncoderGrads:
    """
    Chain dL/dw (one row per view) back to every parameter.

    Free-table rows receive the upstream rows, summed when one row serves
    several views of the batch.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (len(batch), params.output_dim):
        raise InvalidConfig(
            f"upstream shape {upstream.shape} does not match ({len(batch)}, {params.output_dim})"
        )
    if params.backend == "free-table":
        grad = np.zeros_like(params.table)
        np.add.at(grad, batch.table_rows, upstream)
        return EncoderGrads([grad])

    _, memory = _mlp_forward(params.layers, batch.views)
    grads: List[np.ndarray] = []
    delta = upstream
    for layer, (h_in, h_out) in zip(reversed(params.layers), reversed(memory)):
        if layer.activation == "tanh":
            delta = delta * (1.0 - h_out * h_out)
        grads.append(delta.sum(axis=0))
        grads.append(h_in.T @ delta)
        delta = delta @ layer.weights.T
    grads.reverse()
    return EncoderGrads(grads)


def embed_samples(params: EncoderParams, ds: LabeledDataset,
                  sample_ids: Optional[np.ndarray] = None) -> EmbeddingBatch:
    """
    Unaugmented per-sample encodings.

    mlp: encodes the raw inputs. free-table: the sample's view-0 row.
    """
    if sample_ids is None:
        sample_ids = np.arange(len(ds))
    sample_ids = np.asarray(sample_ids, dtype=np.int64)
    if params.backend == "free-table":
        return normalize_rows(params.table[2 * sample_ids])
    return normalize_rows(encode_inputs(params, ds.inputs[sample_ids]))


def _glorot_layers(input_dim: int, hidden: Sequence[int], output_dim: int,
                   activation: str, rng: RngStream) -> List[DenseLayer]:
    widths = [input_dim] + list(hidden) + [output_dim]
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(widths, widths[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append(DenseLayer(
            weights=rng.uniform(-limit, limit, size=(fan_in, fan_out)),
            bias=np.zeros(fan_out),
            activation=activation if i < len(widths) - 2 else "linear",
        ))
    return layers


def _check_backend_args(backend: str, n_samples: Optional[int], input_dim: Optional[int]):
    if backend == "free-table" and not n_samples:
        raise InvalidConfig("free-table init needs n_samples")
    if backend == "mlp" and not input_dim:
        raise InvalidConfig("mlp init needs input_dim")
    if backend not in BACKENDS:
        raise InvalidConfig(f"unknown encoder backend '{backend}'")


def init_standard(backend: str, dim: int, rng: RngStream, n_samples: Optional[int] = None,
                  input_dim: Optional[int] = None, hidden: Sequence[int] = (64, 64),
                  activation: str = "tanh") -> EncoderParams:
    """
    Non-collapsed initialization: Gaussian table rows, or Glorot-uniform
    mlp weights with zero biases.
    """
    _check_backend_args(backend, n_samples, input_dim)
    if backend == "free-table":
        return EncoderParams(backend, table=rng.standard_normal((2 * n_samples, dim)))
    return EncoderParams(backend, layers=_glorot_layers(input_dim, hidden, dim, activation, rng))


def init_near_collapsed(backend: str, eta: float, dim: int, rng: RngStream,
                        n_samples: Optional[int] = None, input_dim: Optional[int] = None,
                        hidden: Sequence[int] = (64, 64), activation: str = "tanh",
                        reference_inputs: Optional[np.ndarray] = None) -> EncoderParams:
    """
    Initialize every output near one shared random unit vector u.

    free-table: rows u + eta * N(0, I)/sqrt(d).
    mlp: Glorot hidden layers, final weights ~ N(0, eta^2/(width*d)) and bias u,
    so the output perturbation has norm of order eta.

    Args:
        backend: free-table or mlp
        eta: Noise scale in (0, 0.1]
        dim: Output dimension d
        rng: Init stream
        n_samples: Sample count (free-table)
        input_dim: Input dimension m (mlp)
        hidden: Hidden widths (mlp)
        activation: Hidden activation (mlp)
        reference_inputs: Inputs for the similarity check (mlp); 256 standard
            normal rows are drawn when omitted

    Returns:
        EncoderParams whose outputs have mean pairwise cosine >= 0.99

    Raises:
        InitFailed: if the similarity target is missed
    """
    if not 0.0 < eta <= 0.1:
        raise InvalidConfig(f"eta must be in (0, 0.1], got {eta}")
    _check_backend_args(backend, n_samples, input_dim)

    shared = rng.standard_normal(dim)
    shared /= np.linalg.norm(shared)

    if backend == "free-table":
        noise = rng.standard_normal((2 * n_samples, dim)) / np.sqrt(dim)
        params = EncoderParams(backend, table=shared + eta * noise)
        reference = params.table
    else:
        layers = _glorot_layers(input_dim, hidden, dim, activation, rng)
        width = layers[-1].weights.shape[0]
        layers[-1].weights = rng.normal(0.0, eta / np.sqrt(width * dim),
                                        size=layers[-1].weights.shape)
        layers[-1].bias = shared.copy()
        params = EncoderParams(backend, layers=layers)
        if reference_inputs is None:
            reference_inputs = rng.standard_normal((256, input_dim))
        reference = encode_inputs(params, reference_inputs)

    similarity = mean_cosine(normalize_rows(reference).z)
    if similarity < MIN_COLLAPSED_COSINE:
        raise InitFailed(
            f"near-collapsed init reached mean cosine {similarity:.4f} < {MIN_COLLAPSED_COSINE}"
        )
    logger.debug("near-collapsed %s init, eta=%g, mean cosine %.5f", backend, eta, similarity)
    return params


def flat_parameters(params: EncoderParams) -> np.ndarray:
    return np.concatenate([a.ravel() for a in params.arrays()])


def set_flat_parameters(params: EncoderParams, flat: np.ndarray) -> EncoderParams:
    """Copy of params with every array refilled from a flat vector"""
    out = params.copy()
    offset = 0
    for array in out.arrays():
        size = array.size
        array[...] = flat[offset:offset + size].reshape(array.shape)
        offset += size
    return out


def _candidate_coordinates(params: EncoderParams, batch: ViewBatch) -> np.ndarray:
    if params.backend == "free-table":
        dim = params.table.shape[1]
        rows = np.unique(batch.table_rows)
        return (rows[:, None] * dim + np.arange(dim)[None, :]).ravel()
    return np.arange(flat_parameters(params).size)


def gradcheck(params: EncoderParams, batch: ViewBatch, loss_fn: Callable,
              n_coords: int = 64, step: float = 1e-6,
              rng: Optional[RngStream] = None) -> GradCheckReport:
    """
    Compare the analytic gradient with central finite differences.

    The per-coordinate error is |a - n| / max(|a|, |n|). A coordinate whose
    discrepancy is within the roundoff of the difference quotient itself,
    ROUNDOFF_FACTOR * eps * max(|f+|, |f-|, 1) / h, counts as exact.

    Args:
        params: Encoder parameters (left untouched)
        batch: Views to encode
        loss_fn: Maps an EmbeddingBatch to an object with .value and .grad_w;
            must be deterministic
        n_coords: Coordinates to check (at least 50 when available)
        step: Finite-difference step h
        rng: Stream choosing the coordinates

    Returns:
        GradCheckReport
    """
    rng = rng if rng is not None else RngStream(0, 0)
    out = loss_fn(forward(params, batch))
    analytic = backward(params, batch, out.grad_w).flat()

    candidates = _candidate_coordinates(params, batch)
    n_coords = min(max(n_coords, 50), candidates.size)
    chosen = np.sort(rng.choice(candidates, size=n_coords, replace=False))

    base = flat_parameters(params)
    eps = np.finfo(np.float64).eps
    worst, worst_abs, floor = 0.0, 0.0, 0.0
    for coord in chosen:
        shifted = base.copy()
        shifted[coord] = base[coord] + step
        f_plus = loss_fn(forward(set_flat_parameters(params, shifted), batch)).value
        shifted[coord] = base[coord] - step
        f_minus = loss_fn(forward(set_flat_parameters(params, shifted), batch)).value
        numeric = (f_plus - f_minus) / (2.0 * step)
        a = analytic[coord]
        noise = ROUNDOFF_FACTOR * eps * max(abs(f_plus), abs(f_minus), 1.0) / step
        discrepancy = abs(a - numeric)
        if discrepancy > noise:
            worst = max(worst, discrepancy / max(abs(a), abs(numeric)))
        worst_abs = max(worst_abs, discrepancy)
        floor = max(floor, noise)
    return GradCheckReport(max_relative_error=float(worst), n_checked=int(n_coords), step=step,
                           max_abs_error=float(worst_abs), noise_floor=float(floor))


def save_checkpoint(params: EncoderParams, file_path: Union[str, Path]) -> Path:
    """JSON checkpoint: backend tag, shapes and row-major float64 values"""
    def pack(array):
        return {"shape": list(array.shape), "values": array.ravel().tolist()}

    payload = {"backend": params.backend}
    if params.backend == "free-table":
        payload["table"] = pack(params.table)
    else:
        payload["layers"] = [
            {"activation": l.activation, "weights": pack(l.weights), "bias": pack(l.bias)}
            for l in params.layers
        ]
    file_path = Path(file_path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    with open(file_path, "w", encoding="utf-8") as f:
        json.dump(payload, f)
    return file_path


def load_checkpoint(file_path: Union[str, Path]) -> EncoderParams:
    def unpack(blob):
        return np.asarray(blob["values"], dtype=np.float64).reshape(blob["shape"])

    with open(file_path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    backend = payload.get("backend")
    if backend == "free-table":
        return EncoderParams(backend, table=unpack(payload["table"]))
    if backend == "mlp":
        layers = [DenseLayer(unpack(l["weights"]), unpack(l["bias"]), l["activation"])
                  for l in payload["layers"]]
        return EncoderParams(backend, layers=layers)
    raise InvalidConfig(f"{file_path}: unknown backend tag '{backend}'")
