"""Label-only classifier access with query accounting.

Three classifier kinds sit behind one ``classify_batch`` call: an inline
linear model, a dense ReLU network loaded from a portable weights
document, and a remote model reached over the ``POST /classify`` wire
protocol.  Only output labels ever cross this boundary; there is no
confidence or gradient access.  Argmax ties always resolve to the lowest
class index so runs stay reproducible.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import requests

WEIGHTS_FORMAT = "dense-layers-v1"
ACTIVATIONS = ("relu", "none")


class WeightsFormatError(ValueError):
    """The weights document cannot be parsed or is internally inconsistent."""


class RemoteTransportError(RuntimeError):
    """Transport-level failure talking to a remote classifier; retryable."""


class QueryLedger:
    """Counts every individual input sent to a classifier.

    ``total_queries`` only grows; ``per_generation`` keeps one counter
    per attack generation when the caller passes a generation tag.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.total_queries = 0
        self.per_generation: list[int] = []

    def record(self, count: int, generation: Optional[int] = None) -> None:
        if count < 0:
            raise ValueError("query count cannot be negative")
        with self._lock:
            self.total_queries += count
            if generation is not None:
                while len(self.per_generation) <= generation:
                    self.per_generation.append(0)
                self.per_generation[generation] += count


@dataclass
class LinearSpec:
    """label = argmax(weight @ x + bias), lowest index on ties."""

    weight: np.ndarray  # (num_classes, input_dim)
    bias: np.ndarray    # (num_classes,)

    def __post_init__(self) -> None:
        self.weight = np.asarray(self.weight, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        if self.weight.ndim != 2:
            raise ValueError(f"weight must be 2-d, got shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError(
                f"bias shape {self.bias.shape} does not match {self.weight.shape[0]} classes"
            )

    @property
    def input_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]


@dataclass
class MlpLayer:
    weight: np.ndarray  # (out, in), row-major
    bias: np.ndarray    # (out,)
    activation: str     # "relu" or "none"


@dataclass
class MlpSpec:
    """Dense feed-forward network from a portable weights document."""

    layers: list[MlpLayer]
    num_classes: int
    input_dim: int
    note: str = ""
    manifest: dict = field(default_factory=dict)

    def validate(self) -> None:
        if not self.layers:
            raise WeightsFormatError("weights document declares no layers")
        expected = self.input_dim
        for i, layer in enumerate(self.layers):
            if layer.activation not in ACTIVATIONS:
                raise WeightsFormatError(
                    f"layer {i}: unknown activation {layer.activation!r}"
                )
            out_dim, in_dim = layer.weight.shape
            if in_dim != expected:
                raise WeightsFormatError(
                    f"layer {i}: expects {in_dim} inputs but receives {expected}"
                )
            if layer.bias.shape != (out_dim,):
                raise WeightsFormatError(
                    f"layer {i}: bias shape {layer.bias.shape} does not match {out_dim} outputs"
                )
            expected = out_dim
        if expected != self.num_classes:
            raise WeightsFormatError(
                f"final layer emits {expected} values but manifest declares "
                f"{self.num_classes} classes"
            )


@dataclass
class RemoteSpec:
    """Classifier reached via POST {url}/classify with JSON bodies.

    The local determinism guarantee does not extend across this boundary;
    the remote model answers whatever it answers.  Concurrent batches are
    throttled to ``max_in_flight`` outstanding requests per spec.
    """

    url: str
    timeout_ms: int = 10_000
    input_dim: Optional[int] = None
    num_classes: Optional[int] = None
    max_in_flight: int = 4

    def __post_init__(self) -> None:
        self._gate = threading.BoundedSemaphore(self.max_in_flight)


ClassifierSpec = Union[LinearSpec, MlpSpec, RemoteSpec]


def mlp_logits(spec: MlpSpec, inputs: np.ndarray) -> np.ndarray:
    a = inputs
    for layer in spec.layers:
        a = a @ layer.weight.T + layer.bias
        if layer.activation == "relu":
            a = np.maximum(a, 0.0)
    return a


def classify_batch(
    spec: ClassifierSpec,
    inputs: Sequence[np.ndarray],
    ledger: Optional[QueryLedger] = None,
    generation: Optional[int] = None,
) -> list[int]:
    """One label per input; the ledger grows by the batch size."""
    batch = np.asarray(inputs, dtype=float)
    if batch.ndim == 1:
        batch = batch[None, :]
    else:
        batch = batch.reshape(len(inputs), -1)
    if batch.size and not np.all(np.isfinite(batch)):
        raise ValueError("classifier inputs must be finite")

    if isinstance(spec, (LinearSpec, MlpSpec)):
        if batch.shape[1] != spec.input_dim:
            raise ValueError(
                f"inputs have dimension {batch.shape[1]}, classifier expects {spec.input_dim}"
            )

    if isinstance(spec, LinearSpec):
        scores = batch @ spec.weight.T + spec.bias
        labels = np.argmax(scores, axis=1)
    elif isinstance(spec, MlpSpec):
        labels = np.argmax(mlp_logits(spec, batch), axis=1)
    elif isinstance(spec, RemoteSpec):
        labels = np.asarray(_classify_remote(spec, batch))
    else:
        raise TypeError(f"unknown classifier spec {type(spec).__name__}")

    if ledger is not None:
        ledger.record(batch.shape[0], generation)
    return [int(v) for v in labels]


def _classify_remote(spec: RemoteSpec, batch: np.ndarray) -> list[int]:
    url = spec.url.rstrip("/") + "/classify"
    body = {"instances": batch.tolist()}
    try:
        with spec._gate:
            response = requests.post(url, json=body, timeout=spec.timeout_ms / 1000.0)
    except requests.RequestException as exc:
        raise RemoteTransportError(f"classifier at {url} unreachable: {exc}") from exc
    if response.status_code != 200:
        raise RemoteTransportError(
            f"classifier at {url} answered status {response.status_code}"
        )
    try:
        payload = response.json()
        labels = payload["labels"]
    except (ValueError, KeyError) as exc:
        raise RemoteTransportError(f"malformed response from {url}: {exc}") from exc
    if not isinstance(labels, list) or len(labels) != batch.shape[0]:
        raise RemoteTransportError(
            f"expected {batch.shape[0]} labels from {url}, got {labels!r}"
        )
    return [int(v) for v in labels]


def load_weights(path: Union[str, Path]) -> MlpSpec:
    """Parse and validate a weights document."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise WeightsFormatError(
            f"cannot parse {path}: {exc.msg} at byte offset {exc.pos}"
        ) from exc
    return spec_from_document(doc)


def spec_from_document(doc: dict) -> MlpSpec:
    if doc.get("format") != WEIGHTS_FORMAT:
        raise WeightsFormatError(
            f"unsupported weights format {doc.get('format')!r}, expected {WEIGHTS_FORMAT!r}"
        )
    manifest = doc.get("manifest")
    if not isinstance(manifest, dict):
        raise WeightsFormatError("weights document is missing its manifest block")
    try:
        num_classes = int(manifest["num_classes"])
        input_dim = int(manifest["input_dim"])
    except (KeyError, TypeError, ValueError) as exc:
        raise WeightsFormatError(f"manifest missing num_classes/input_dim: {exc}") from exc
    layers = []
    for i, entry in enumerate(doc.get("layers", [])):
        try:
            weight = np.asarray(entry["weight"], dtype=float)
            bias = np.asarray(entry["bias"], dtype=float)
            activation = entry["activation"]
        except (KeyError, TypeError, ValueError) as exc:
            raise WeightsFormatError(f"layer {i} malformed: {exc}") from exc
        if weight.ndim != 2:
            raise WeightsFormatError(f"layer {i}: weight must be 2-d, got {weight.shape}")
        layers.append(MlpLayer(weight=weight, bias=bias, activation=activation))
    spec = MlpSpec(
        layers=layers,
        num_classes=num_classes,
        input_dim=input_dim,
        note=str(manifest.get("note", "")),
        manifest=manifest,
    )
    spec.validate()
    return spec


def save_weights(spec: MlpSpec, path: Union[str, Path]) -> None:
    doc = {
        "format": WEIGHTS_FORMAT,
        "manifest": {
            **spec.manifest,
            "num_classes": spec.num_classes,
            "input_dim": spec.input_dim,
            "note": spec.note,
        },
        "layers": [
            {
                "weight": layer.weight.tolist(),
                "bias": layer.bias.tolist(),
                "activation": layer.activation,
            }
            for layer in spec.layers
        ],
    }
    Path(path).write_text(json.dumps(doc))
