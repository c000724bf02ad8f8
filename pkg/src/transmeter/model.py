"""Source classifier and the encoder/decoder/label-predictor/domain-classifier network."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .data import Batch, NormStats
from .errors import InvalidArgumentError, LoadError, ShapeError
from .nn import DenseLayer, MLP

DEFAULT_PREDICTOR_WIDTHS = (64, 32, 16, 8)
DEEP_PREDICTOR_WIDTHS = (64, 48, 32, 16, 8)
DEFAULT_ENCODER_WIDTHS = (64, 32, 32)
DEEP_ENCODER_WIDTHS = (64, 48, 32, 32)

CHECKPOINT_FORMAT = "transmeter-checkpoint/1"


@dataclass
class SourceModel:
    net: MLP
    norm: Optional[NormStats] = None
    meta: Dict = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return self.net.in_features

    @property
    def hidden_widths(self) -> List[int]:
        return self.net.widths[1:-1]

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.net.forward(x, train=False).reshape(-1)


@dataclass
class TransmeterModel:
    encoder: MLP
    decoder: MLP
    label_predictor: MLP
    domain_classifier: MLP
    alpha: float
    beta: float
    meta: Dict = field(default_factory=dict)

    @property
    def d_s(self) -> int:
        return self.encoder.out_features

    @property
    def d_t(self) -> int:
        return self.encoder.in_features

    def blocks(self) -> Dict[str, MLP]:
        return {
            "encoder": self.encoder,
            "decoder": self.decoder,
            "label_predictor": self.label_predictor,
            "domain_classifier": self.domain_classifier,
        }

    def state(self) -> Dict:
        return {name: net.state() for name, net in self.blocks().items()}

    def load_state(self, state: Dict) -> None:
        for name, net in self.blocks().items():
            net.load_state(state[name])


@dataclass
class HomogeneousBatch:
    representation: np.ndarray
    domain_labels: np.ndarray


def build_classifier(d_in: int, hidden_widths: Sequence[int], rng: np.random.Generator) -> MLP:
    """BN+ReLU hidden layers and a single sigmoid output unit."""
    if not hidden_widths:
        raise InvalidArgumentError("hidden widths must be non-empty")
    return MLP.build([d_in, *hidden_widths, 1], rng, output_activation="sigmoid")


def build_source_model(
    d_s: int, hidden_widths: Sequence[int] = DEFAULT_PREDICTOR_WIDTHS, rng: Optional[np.random.Generator] = None
) -> SourceModel:
    rng = rng if rng is not None else np.random.default_rng()
    return SourceModel(build_classifier(d_s, hidden_widths, rng))


def build_transmeter(
    d_s: int,
    d_t: int,
    encoder_widths: Sequence[int] = DEFAULT_ENCODER_WIDTHS,
    source: Optional[SourceModel] = None,
    alpha: float = 0.1,
    beta: float = 0.1,
    rng: Optional[np.random.Generator] = None,
    predictor_widths: Optional[Sequence[int]] = None,
) -> TransmeterModel:
    """Assemble the four blocks.

    With ``source`` the label predictor is a by-value copy of the source
    network; otherwise it is freshly He-initialized with the same shape.
    """
    rng = rng if rng is not None else np.random.default_rng()
    if alpha < 0 or beta < 0:
        raise InvalidArgumentError("alpha and beta must be nonnegative")
    if not encoder_widths:
        raise InvalidArgumentError("encoder widths must be non-empty")
    if source is not None and source.input_dim != d_s:
        raise ShapeError(f"source model takes {source.input_dim} features, d_s is {d_s}")

    encoder = MLP.build([d_t, *encoder_widths, d_s], rng)
    decoder = MLP.build([d_s, *reversed(encoder_widths), d_t], rng)
    if source is not None:
        label_predictor = source.net.copy()
    else:
        widths = predictor_widths if predictor_widths is not None else DEFAULT_PREDICTOR_WIDTHS
        label_predictor = build_classifier(d_s, widths, rng)
    domain_classifier = MLP([DenseLayer(d_s, 1, activation="sigmoid", rng=rng)])
    return TransmeterModel(encoder, decoder, label_predictor, domain_classifier, alpha, beta)


def _as_batch(model: TransmeterModel, batch: Union[Batch, np.ndarray]) -> Batch:
    if isinstance(batch, Batch):
        return batch
    x = np.asarray(batch, dtype=float)
    return Batch(np.zeros((0, model.d_s)), np.zeros(0), x, np.zeros(x.shape[0]))


def homogeneous(model: TransmeterModel, batch: Union[Batch, np.ndarray], train: bool = False) -> HomogeneousBatch:
    """Source rows pass through unchanged, target rows through the encoder.

    A bare array is treated as target rows. Source rows come first.
    """
    batch = _as_batch(model, batch)
    parts = []
    if batch.n_source:
        if batch.source_features.shape[1] != model.d_s:
            raise ShapeError(f"source rows have width {batch.source_features.shape[1]}, expected {model.d_s}")
        parts.append(batch.source_features)
    if batch.n_target:
        if batch.target_features.shape[1] != model.d_t:
            raise ShapeError(f"target rows have width {batch.target_features.shape[1]}, expected {model.d_t}")
        parts.append(model.encoder.forward(batch.target_features, train))
    if not parts:
        raise InvalidArgumentError("empty batch")
    rep = parts[0] if len(parts) == 1 else np.vstack(parts)
    return HomogeneousBatch(rep, batch.domain_labels)


def predict_label(model: TransmeterModel, batch, train: bool = False) -> np.ndarray:
    rep = homogeneous(model, batch, train).representation
    return model.label_predictor.forward(rep, train).reshape(-1)


def predict_domain(model: TransmeterModel, batch, train: bool = False) -> np.ndarray:
    rep = homogeneous(model, batch, train).representation
    return model.domain_classifier.forward(rep, train).reshape(-1)


def reconstruct(model: TransmeterModel, target_batch, train: bool = False) -> np.ndarray:
    batch = _as_batch(model, target_batch)
    if batch.n_source:
        raise InvalidArgumentError("reconstruction is defined for target rows only")
    rep = homogeneous(model, batch, train).representation
    return model.decoder.forward(rep, train)


# checkpoints --------------------------------------------------------------


def _encode_array(arr: np.ndarray) -> Dict:
    return {"shape": list(arr.shape), "data": [float(v).hex() for v in arr.reshape(-1)]}


def _decode_array(obj: Dict) -> np.ndarray:
    data = np.array([float.fromhex(v) for v in obj["data"]], dtype=np.float64)
    return data.reshape(obj["shape"])


def mlp_to_dict(net: MLP, role: str) -> List[Dict]:
    layers = []
    for i, layer in enumerate(net.layers):
        arrays = {name: _encode_array(getattr(layer, name)) for name in layer.param_names() + layer.buffer_names()}
        layers.append(
            {
                "role": role,
                "index": i,
                "shape": [layer.out_features, layer.in_features],
                "activation": layer.activation,
                "batchnorm": layer.has_batchnorm,
                "bn_momentum": float(layer.bn_momentum).hex(),
                "bn_epsilon": float(layer.bn_epsilon).hex(),
                "arrays": arrays,
            }
        )
    return layers


def mlp_from_dict(layers: List[Dict]) -> MLP:
    built = []
    for spec in layers:
        out_f, in_f = spec["shape"]
        layer = DenseLayer(
            in_f,
            out_f,
            activation=spec["activation"],
            batchnorm=spec["batchnorm"],
            rng=np.random.default_rng(0),
            bn_momentum=float.fromhex(spec["bn_momentum"]),
            bn_epsilon=float.fromhex(spec["bn_epsilon"]),
        )
        for name, obj in spec["arrays"].items():
            arr = _decode_array(obj)
            if arr.shape != getattr(layer, name).shape:
                raise LoadError(f"checkpoint array {spec['role']}[{spec['index']}].{name} has shape {arr.shape}")
            setattr(layer, name, arr)
        built.append(layer)
    return MLP(built)


def _dump(doc: Dict, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _read(path, kind: str) -> Dict:
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"checkpoint not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise LoadError(f"{path}: not a valid checkpoint ({exc})") from None
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("kind") != kind:
        raise LoadError(f"{path}: expected a {kind} checkpoint")
    return doc


def source_model_to_dict(model: SourceModel) -> Dict:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "kind": "source",
        "d_s": model.input_dim,
        "meta": model.meta,
        "layers": mlp_to_dict(model.net, "source"),
    }
    if model.norm is not None:
        doc["norm"] = {"mean": _encode_array(model.norm.mean), "std": _encode_array(model.norm.std)}
    return doc


def save_source_model(model: SourceModel, path) -> None:
    _dump(source_model_to_dict(model), path)


def load_source_model(path) -> SourceModel:
    doc = _read(path, "source")
    norm = None
    if "norm" in doc:
        norm = NormStats(_decode_array(doc["norm"]["mean"]), _decode_array(doc["norm"]["std"]))
    return SourceModel(mlp_from_dict(doc["layers"]), norm, doc.get("meta", {}))


def transmeter_to_dict(model: TransmeterModel) -> Dict:
    layers = []
    for role, net in model.blocks().items():
        layers.extend(mlp_to_dict(net, role))
    return {
        "format": CHECKPOINT_FORMAT,
        "kind": "transmeter",
        "d_s": model.d_s,
        "d_t": model.d_t,
        "alpha": float(model.alpha).hex(),
        "beta": float(model.beta).hex(),
        "flip": bool(model.meta.get("flip", False)),
        "seed": model.meta.get("seed"),
        "meta": model.meta,
        "layers": layers,
    }


def save_transmeter(model: TransmeterModel, path) -> None:
    _dump(transmeter_to_dict(model), path)


def load_transmeter(path) -> TransmeterModel:
    doc = _read(path, "transmeter")
    by_role: Dict[str, List[Dict]] = {}
    for spec in doc["layers"]:
        by_role.setdefault(spec["role"], []).append(spec)
    nets = {role: mlp_from_dict(sorted(specs, key=lambda s: s["index"])) for role, specs in by_role.items()}
    return TransmeterModel(
        nets["encoder"],
        nets["decoder"],
        nets["label_predictor"],
        nets["domain_classifier"],
        float.fromhex(doc["alpha"]),
        float.fromhex(doc["beta"]),
        doc.get("meta", {}),
    )
