"""Late-fusion multi-modal classifiers.

Each modality ``m`` has an encoder ``phi_m`` (a small MLP).  Two heads combine
the representations:

* :class:`StandardHead` -- one joint linear layer, ``h = sum_m W_m phi_m + b``.
* :class:`OrthogonalHead` -- per modality a matrix ``W~_m`` with orthonormal rows
  and a nonnegative class-weight vector ``a_m``;
  ``h~_k = sum_m a_mk * (W~_m phi_m)_k + b~_k``.

Weights are stored in ``out x in`` orientation and batches are row-major, so a
layer computes ``act(x @ W.T + b)``.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Node, Tape
from .rng import PortableRNG

ACTIVATIONS = ("relu", "tanh", "identity")
CHECKPOINT_FORMAT = "mmcert-ckpt-1"
ORTHO_TOL = 1e-6


class ModelError(ValueError):
    pass


class RankDeficientError(ModelError):
    pass


class OrthogonalityError(ModelError):
    """An orthogonal head no longer satisfies ``W~ W~^T = I``."""


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.array(self.weight, dtype=np.float64, ndmin=2)
        self.bias = np.array(self.bias, dtype=np.float64).reshape(1, -1)
        if self.activation not in ACTIVATIONS:
            raise ModelError(f"unsupported activation {self.activation!r}")
        if self.bias.shape[1] != self.weight.shape[0]:
            raise ModelError(f"bias length {self.bias.shape[1]} != {self.weight.shape[0]} outputs")


@dataclass
class Encoder:
    layers: list[Layer]

    def __post_init__(self):
        if not self.layers:
            raise ModelError("encoder needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weight.shape[0] != nxt.weight.shape[1]:
                raise ModelError("consecutive layer dimensions do not chain")

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        for layer in self.layers:
            h = _activate(h @ layer.weight.T + layer.bias, layer.activation)
        return h


def _activate(z, activation):
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "tanh":
        return np.tanh(z)
    return z


@dataclass
class StandardHead:
    W_parts: list[np.ndarray]
    bias: np.ndarray

    kind = "standard"

    def __post_init__(self):
        self.W_parts = [np.array(w, dtype=np.float64, ndmin=2) for w in self.W_parts]
        self.bias = np.array(self.bias, dtype=np.float64).reshape(1, -1)

    @property
    def K(self) -> int:
        return self.bias.shape[1]


@dataclass
class OrthogonalHead:
    W_tilde: list[np.ndarray]
    a: list[np.ndarray]
    bias: np.ndarray

    kind = "orthogonal"

    def __post_init__(self):
        self.W_tilde = [np.array(w, dtype=np.float64, ndmin=2) for w in self.W_tilde]
        self.a = [np.array(v, dtype=np.float64).reshape(1, -1) for v in self.a]
        self.bias = np.array(self.bias, dtype=np.float64).reshape(1, -1)

    @property
    def K(self) -> int:
        return self.bias.shape[1]

    def orth_residual(self) -> float:
        """Largest ``|W~ W~^T - I|`` entry over modalities."""
        eye = np.eye(self.K)
        return max(float(np.max(np.abs(w @ w.T - eye))) for w in self.W_tilde)


@dataclass
class MultiModalModel:
    encoders: list[Encoder]
    head: StandardHead | OrthogonalHead
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.encoders) < 2:
            raise ModelError("a multi-modal model needs at least two modalities")
        parts = self.head.W_parts if self.head.kind == "standard" else self.head.W_tilde
        if len(parts) != len(self.encoders):
            raise ModelError("head and encoder counts differ")
        for m, (enc, w) in enumerate(zip(self.encoders, parts)):
            if w.shape != (self.K, enc.output_dim):
                raise ModelError(f"head part {m} has shape {w.shape}, "
                                 f"expected {(self.K, enc.output_dim)}")
        if self.head.kind == "orthogonal":
            for m, (enc, a) in enumerate(zip(self.encoders, self.head.a)):
                if enc.output_dim < self.K:
                    raise ModelError(f"encoder {m} output dim {enc.output_dim} < K={self.K}")
                if a.shape != (1, self.K):
                    raise ModelError(f"a[{m}] has shape {a.shape}")

    @property
    def K(self) -> int:
        return self.head.K

    @property
    def n_modalities(self) -> int:
        return len(self.encoders)

    @property
    def modality_dims(self) -> list[int]:
        return [e.input_dim for e in self.encoders]

    @property
    def kind(self) -> str:
        return self.head.kind

    def copy(self) -> "MultiModalModel":
        return copy.deepcopy(self)

    def parameters(self) -> dict[str, np.ndarray]:
        """All parameter arrays, keyed by name, in checkpoint order."""
        params = {}
        for m, enc in enumerate(self.encoders):
            for i, layer in enumerate(enc.layers):
                params[f"enc{m}.l{i}.weight"] = layer.weight
                params[f"enc{m}.l{i}.bias"] = layer.bias
        if self.kind == "standard":
            for m, w in enumerate(self.head.W_parts):
                params[f"head.W{m}"] = w
        else:
            for m, w in enumerate(self.head.W_tilde):
                params[f"head.Wt{m}"] = w
            for m, a in enumerate(self.head.a):
                params[f"head.a{m}"] = a
        params["head.bias"] = self.head.bias
        return params

    def set_parameters(self, values: dict[str, np.ndarray]) -> None:
        for name, value in values.items():
            value = np.array(value, dtype=np.float64)
            if name == "head.bias":
                self.head.bias = value.reshape(1, -1)
                continue
            if name.startswith("enc"):
                m, i, what = name[3:].split(".")
                layer = self.encoders[int(m)].layers[int(i[1:])]
                setattr(layer, what, value.reshape(getattr(layer, what).shape))
            elif name.startswith("head.Wt"):
                self.head.W_tilde[int(name[7:])] = value
            elif name.startswith("head.W"):
                self.head.W_parts[int(name[6:])] = value
            elif name.startswith("head.a"):
                self.head.a[int(name[6:])] = value.reshape(1, -1)
            else:
                raise KeyError(name)


# ---------------------------------------------------------------------------
# evaluation


def _check_inputs(model, xs):
    if len(xs) != model.n_modalities:
        raise ModelError(f"expected {model.n_modalities} modalities, got {len(xs)}")
    out = []
    for m, (x, d) in enumerate(zip(xs, model.modality_dims)):
        x = np.array(x, dtype=np.float64, ndmin=2)
        if x.shape[1] != d:
            raise ModelError(f"modality {m} has dim {x.shape[1]}, expected {d}")
        out.append(x)
    return out


def encode(model: MultiModalModel, xs) -> list[np.ndarray]:
    return [enc(x) for enc, x in zip(model.encoders, _check_inputs(model, xs))]


def forward_standard(model: MultiModalModel, xs) -> np.ndarray:
    """Logits ``sum_m phi_m(x_m) W_m^T + b`` for a batch (rows are samples)."""
    if model.kind != "standard":
        raise ModelError("forward_standard needs a standard head")
    phis = encode(model, xs)
    total = phis[0] @ model.head.W_parts[0].T
    for phi, w in zip(phis[1:], model.head.W_parts[1:]):
        total = total + phi @ w.T
    return total + model.head.bias


def check_orthonormal(head: OrthogonalHead, tol: float = ORTHO_TOL) -> None:
    residual = head.orth_residual()
    if residual > tol:
        raise OrthogonalityError(f"orthonormality residual {residual:.3e} exceeds {tol:g}")


def uni_scores(model: MultiModalModel, xs) -> list[np.ndarray]:
    """Per-modality class scores ``s_m = W~_m phi_m(x_m)``, each ``n x K``."""
    return [phi @ w.T for phi, w in zip(encode(model, xs), model.head.W_tilde)]


def forward_orth(model: MultiModalModel, xs, return_scores: bool = False):
    if model.kind != "orthogonal":
        raise ModelError("forward_orth needs an orthogonal head")
    check_orthonormal(model.head)
    scores = uni_scores(model, xs)
    total = model.head.a[0] * scores[0]
    for a, s in zip(model.head.a[1:], scores[1:]):
        total = total + a * s
    logits = total + model.head.bias
    return (logits, scores) if return_scores else logits


def logits(model: MultiModalModel, xs) -> np.ndarray:
    if model.kind == "standard":
        return forward_standard(model, xs)
    return forward_orth(model, xs)


def predict(model: MultiModalModel, xs) -> np.ndarray:
    return np.argmax(logits(model, xs), axis=1)


def build_graph(tape: Tape, model: MultiModalModel, inputs: list[Node],
                params: dict[str, Node] | None = None):
    """Record the model's forward pass on ``tape``.

    ``params`` maps parameter names to tape nodes (normally variables);
    any parameter missing from it enters the tape as a constant.

    Returns ``(logits, scores)`` where ``scores`` is the list of per-modality
    score nodes for an orthogonal head and ``None`` otherwise.
    """
    params = params or {}

    def p(name, value):
        return params[name] if name in params else tape.const(value)

    phis = []
    for m, (enc, x) in enumerate(zip(model.encoders, inputs)):
        h = x
        for i, layer in enumerate(enc.layers):
            w = p(f"enc{m}.l{i}.weight", layer.weight)
            b = p(f"enc{m}.l{i}.bias", layer.bias)
            h = tape.add(tape.matmul(h, tape.transpose(w)), b)
            if layer.activation == "relu":
                h = tape.relu(h)
            elif layer.activation == "tanh":
                h = tape.tanh(h)
        phis.append(h)
    bias = p("head.bias", model.head.bias)
    if model.kind == "standard":
        total = None
        for m, phi in enumerate(phis):
            term = tape.matmul(phi, tape.transpose(p(f"head.W{m}", model.head.W_parts[m])))
            total = term if total is None else tape.add(total, term)
        return tape.add(total, bias), None
    scores, total = [], None
    for m, phi in enumerate(phis):
        s = tape.matmul(phi, tape.transpose(p(f"head.Wt{m}", model.head.W_tilde[m])))
        scores.append(s)
        term = tape.mul(s, p(f"head.a{m}", model.head.a[m]))
        total = term if total is None else tape.add(total, term)
    return tape.add(total, bias), scores


# ---------------------------------------------------------------------------
# construction


def orthonormalize(W, rank_tol: float = 1e-10) -> np.ndarray:
    """Row-orthonormal factor of ``W`` spanning the same row space.

    Computed from the QR decomposition of ``W^T`` with the sign convention
    ``diag(R) > 0``, so an already orthonormal input comes back unchanged.
    """
    W = np.array(W, dtype=np.float64, ndmin=2)
    rows, cols = W.shape
    if rows > cols:
        raise ModelError(f"cannot orthonormalize {rows} rows in {cols} dimensions")
    q, r = np.linalg.qr(W.T)
    diag = np.diag(r)
    scale = max(float(np.max(np.abs(diag))), np.finfo(float).tiny)
    if np.min(np.abs(diag)) <= rank_tol * scale:
        raise RankDeficientError("rows are numerically linearly dependent")
    signs = np.where(diag < 0, -1.0, 1.0)
    return (q * signs).T.copy()


@dataclass
class ModelConfig:
    modality_dims: list[int]
    K: int
    hidden: list[int] = field(default_factory=lambda: [32])
    out_dim: int = 16
    activation: str = "tanh"
    head: str = "standard"

    def validate(self):
        if len(self.modality_dims) < 2:
            raise ModelError("need at least two modalities")
        if self.K < 2:
            raise ModelError("need at least two classes")
        if self.head not in ("standard", "orthogonal"):
            raise ModelError(f"unknown head {self.head!r}")
        if self.activation not in ACTIVATIONS:
            raise ModelError(f"unsupported activation {self.activation!r}")
        if self.head == "orthogonal" and self.out_dim < self.K:
            raise ModelError(f"encoder output dim {self.out_dim} < K={self.K} "
                             "under an orthogonal head")


def init_model(config: ModelConfig, seed: int) -> MultiModalModel:
    """Seeded initialisation; weights ~ N(0, 1/fan_in), biases 0, a = 1."""
    config.validate()
    rng = PortableRNG(seed, stream=0x5EED)
    widths = list(config.hidden) + [config.out_dim]
    encoders = []
    for d in config.modality_dims:
        layers, fan_in = [], d
        for i, width in enumerate(widths):
            act = config.activation if i < len(widths) - 1 else "identity"
            w = rng.normal((width, fan_in)) / np.sqrt(fan_in)
            layers.append(Layer(w, np.zeros(width), act))
            fan_in = width
        encoders.append(Encoder(layers))
    K, n_mod = config.K, len(config.modality_dims)
    if config.head == "standard":
        fan = config.out_dim * n_mod
        head = StandardHead([rng.normal((K, config.out_dim)) / np.sqrt(fan) for _ in range(n_mod)],
                            np.zeros(K))
    else:
        parts = [orthonormalize(rng.normal((K, config.out_dim))) for _ in range(n_mod)]
        head = OrthogonalHead(parts, [np.ones(K) for _ in range(n_mod)], np.zeros(K))
    meta = {"hidden": list(config.hidden), "out_dim": config.out_dim,
            "activation": config.activation}
    return MultiModalModel(encoders, head, seed=seed, meta=meta)


def orthogonal_variant(model: MultiModalModel) -> MultiModalModel:
    """Orthogonal-head copy of a model: same encoders, a = 1, orthonormalised W."""
    parts = model.head.W_parts if model.kind == "standard" else model.head.W_tilde
    head = OrthogonalHead([orthonormalize(w) for w in parts],
                          [np.ones(model.K) for _ in parts], model.head.bias.copy())
    return MultiModalModel(copy.deepcopy(model.encoders), head, model.seed, dict(model.meta))


# ---------------------------------------------------------------------------
# checkpoints: <prefix>.json manifest + <prefix>.bin float64 little-endian


def save_checkpoint(model: MultiModalModel, prefix) -> tuple[Path, Path]:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    params = model.parameters()
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "head": model.kind,
        "K": model.K,
        "modality_dims": model.modality_dims,
        "seed": model.seed,
        "meta": model.meta,
        "encoders": [[{"in": l.weight.shape[1], "out": l.weight.shape[0],
                       "activation": l.activation} for l in enc.layers]
                     for enc in model.encoders],
        "parameters": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
    }
    json_path = prefix.with_suffix(".json")
    bin_path = prefix.with_suffix(".bin")
    json_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    blob = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in params.values())
    bin_path.write_bytes(blob)
    return json_path, bin_path


def load_checkpoint(prefix) -> MultiModalModel:
    prefix = Path(prefix)
    manifest = json.loads(prefix.with_suffix(".json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ModelError(f"unsupported checkpoint format {manifest.get('format')!r}")
    flat = np.frombuffer(prefix.with_suffix(".bin").read_bytes(), dtype="<f8")
    expected = sum(int(np.prod(p["shape"])) for p in manifest["parameters"])
    if flat.size != expected:
        raise ModelError(f"checkpoint holds {flat.size} values, manifest declares {expected}")
    K = manifest["K"]
    encoders = [Encoder([Layer(np.zeros((l["out"], l["in"])), np.zeros(l["out"]), l["activation"])
                         for l in spec]) for spec in manifest["encoders"]]
    n_mod = len(encoders)
    if manifest["head"] == "standard":
        head = StandardHead([np.zeros((K, e.output_dim)) for e in encoders], np.zeros(K))
    else:
        head = OrthogonalHead([np.eye(K, e.output_dim) for e in encoders],
                              [np.ones(K) for _ in range(n_mod)], np.zeros(K))
    model = MultiModalModel(encoders, head, manifest.get("seed"), manifest.get("meta", {}))
    values, offset = {}, 0
    for p in manifest["parameters"]:
        size = int(np.prod(p["shape"]))
        values[p["name"]] = flat[offset:offset + size].reshape(p["shape"]).astype(np.float64)
        offset += size
    model.set_parameters(values)
    return model
