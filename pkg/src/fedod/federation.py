"""Round orchestration for federated training plus the per-client ensemble step.

Every model transfer goes through full serialization: the receiver only ever
sees a model rebuilt from the message payload.
"""

from __future__ import annotations

import base64
import dataclasses
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import boxkit, detector, distill, tensornn as tnn
from .boxkit import DetectionSet
from .detector import DetectorModel, TrainConfig
from .distill import DistillConfig

log = logging.getLogger(__name__)

SERVER_ID = 0
SERVER_TO_CLIENT = "server->client"
CLIENT_TO_SERVER = "client->server"


def derive_seed(master: int, round_index: int, party_id: int) -> int:
    """Per-(round, party) seed: master + round*1000 + party; the server is party 0."""
    return master + round_index * 1000 + party_id


@dataclass(frozen=True)
class Message:
    direction: str
    round: int
    payload_kind: str
    payload_bytes: bytes
    sender: int
    receiver: int

    def to_json(self) -> dict:
        return {
            "direction": self.direction,
            "round": self.round,
            "payload_kind": self.payload_kind,
            "sender": self.sender,
            "receiver": self.receiver,
            "sha256": hashlib.sha256(self.payload_bytes).hexdigest(),
            "payload": base64.b64encode(self.payload_bytes).decode("ascii"),
        }

    @classmethod
    def from_json(cls, d: dict) -> "Message":
        payload = base64.b64decode(d["payload"])
        if hashlib.sha256(payload).hexdigest() != d["sha256"]:
            raise tnn.CheckpointError(f"message payload digest mismatch in round {d['round']}")
        return cls(d["direction"], d["round"], d["payload_kind"], payload, d["sender"], d["receiver"])


def send_model(model: DetectorModel, direction: str, round_index: int, sender: int, receiver: int):
    """Serialize ``model`` into a message and return (message, model as received)."""
    msg = Message(direction, round_index, "model", model.to_bytes(), sender, receiver)
    return msg, DetectorModel.from_bytes(msg.payload_bytes, expect=model.arch)


@dataclass
class FederationState:
    round: int
    global_model: DetectorModel
    client_models: dict[int, DetectorModel]
    base_model: DetectorModel
    message_log: list[Message] = field(default_factory=list)
    rng_seed: int = 0

    @classmethod
    def start(cls, base_model: DetectorModel, client_ids, seed: int = 0) -> "FederationState":
        return cls(0, base_model.copy(), {}, base_model.copy(), [], seed)

    def checksums(self) -> dict[str, str]:
        out = {"global": self.global_model.checksum(), "base": self.base_model.checksum()}
        out.update({f"client_{c}": m.checksum() for c, m in sorted(self.client_models.items())})
        return out


@dataclass
class FederationData:
    server_train: object
    client_train: dict[int, object]


@dataclass
class RoundRecord:
    round: int
    client_models: dict[int, DetectorModel]
    global_model: DetectorModel
    distill_log: list[dict]


def _client_update(client_id, payload_model, dataset, train_cfg, seed):
    return detector.train_local(payload_model, dataset, train_cfg.epochs, train_cfg.lr, seed, train_cfg.batch_size)


def run_round(
    state: FederationState,
    data: FederationData,
    train_cfg: TrainConfig,
    distill_cfg: DistillConfig,
    aggregator: str = "distill",
    selected: list[int] | None = None,
    workers: int = 1,
    client_order: list[int] | None = None,
    distill_log: list | None = None,
) -> tuple[FederationState, RoundRecord]:
    """One communication round; returns the new state and what it produced.

    Order: broadcast w_g, local fine-tuning on every selected client, upload
    of the personalized models, server aggregation (distillation on server
    data, or FedAvg weighted by client dataset size).
    """
    t = state.round + 1
    selected = sorted(data.client_train) if selected is None else sorted(selected)
    missing = [c for c in selected if c not in data.client_train]
    if missing:
        raise KeyError(f"no training data for clients {missing}")
    if aggregator == "distill" and data.server_train is None:
        raise KeyError("distillation aggregator needs server training data")
    if aggregator not in ("distill", "fedavg"):
        raise ValueError(f"unknown aggregator {aggregator!r}")

    messages = list(state.message_log)
    received = {}
    for c in selected:
        msg, model = send_model(state.global_model, SERVER_TO_CLIENT, t, SERVER_ID, c)
        messages.append(msg)
        received[c] = model

    order = selected if client_order is None else list(client_order)
    if sorted(order) != selected:
        raise ValueError("client_order must be a permutation of the selected clients")
    jobs = {c: (c, received[c], data.client_train[c], train_cfg, derive_seed(state.rng_seed, t, c)) for c in order}
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            futures = {c: pool.submit(_client_update, *jobs[c]) for c in order}
            trained = {c: futures[c].result() for c in order}
    else:
        trained = {c: _client_update(*jobs[c]) for c in order}

    uploads = {}
    for c in selected:
        msg, model = send_model(trained[c], CLIENT_TO_SERVER, t, c, SERVER_ID)
        messages.append(msg)
        uploads[c] = model

    teachers = [uploads[c] for c in selected]
    rows: list[dict] = []
    if aggregator == "distill":
        new_global = distill.distill_aggregate(
            state.global_model,
            teachers,
            data.server_train,
            distill_cfg,
            derive_seed(state.rng_seed, t, SERVER_ID),
            round_index=t,
            log=rows,
        )
    else:
        sizes = np.array([len(data.client_train[c].images) for c in selected], dtype=np.float64)
        new_global = distill.fedavg_aggregate(teachers, sizes / sizes.sum())
    if distill_log is not None:
        distill_log.extend(rows)
    log.info("round %d done (%s, %d clients)", t, aggregator, len(selected))

    client_models = dict(state.client_models)
    client_models.update(trained)
    new_state = FederationState(t, new_global, client_models, state.base_model, messages, state.rng_seed)
    return new_state, RoundRecord(t, dict(trained), new_global, rows)


@dataclass
class FederationConfig:
    rounds: int = 3
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    aggregator: str = "distill"
    workers: int = 1
    checkpoint_dir: str | None = None


def run_federation(
    base_model: DetectorModel,
    data: FederationData,
    config: FederationConfig,
    resume_from: FederationState | None = None,
) -> tuple[FederationState, list[RoundRecord]]:
    """Run (or continue) federated training up to ``config.rounds`` rounds."""
    state = resume_from or FederationState.start(base_model, sorted(data.client_train), config.seed)
    records: list[RoundRecord] = []
    if config.checkpoint_dir and state.round == 0:
        save_checkpoint(state, config.checkpoint_dir)
    while state.round < config.rounds:
        state, rec = run_round(
            state, data, config.train, config.distill, config.aggregator, workers=config.workers
        )
        records.append(rec)
        if config.checkpoint_dir:
            save_checkpoint(state, config.checkpoint_dir)
    return state, records


# ---------------------------------------------------------------------------
# ensemble step
# ---------------------------------------------------------------------------


# WBF cluster IoU inside the two-model ensemble. Looser than the library default
# so a personal box and its slightly offset global twin merge instead of both
# surviving at half confidence.
ENSEMBLE_WBF_IOU = 0.4


@dataclass
class EnsembleModel:
    global_model: DetectorModel
    personal: DetectorModel
    iou_threshold: float = ENSEMBLE_WBF_IOU
    num_models: int = 2

    def __post_init__(self):
        if self.num_models != 2:
            raise ValueError("the ensemble fuses exactly two models")


def ensemble_step(
    state: FederationState, client_id: int, client_data, train_cfg: TrainConfig, iou_threshold=ENSEMBLE_WBF_IOU
) -> EnsembleModel:
    """Fetch the latest w_g, fine-tune it locally and pair the two models."""
    if state.round < 1:
        raise ValueError("ensemble step requires at least one completed round")
    if client_id not in state.client_models:
        raise KeyError(f"unknown client {client_id}")
    _, latest = send_model(state.global_model, SERVER_TO_CLIENT, state.round + 1, SERVER_ID, client_id)
    personal = detector.train_local(
        latest,
        client_data,
        train_cfg.epochs,
        train_cfg.lr,
        derive_seed(state.rng_seed, state.round + 1, client_id),
        train_cfg.batch_size,
    )
    return EnsembleModel(latest, personal, iou_threshold)


@dataclass(frozen=True)
class Thresholds:
    score: float = detector.DEFAULT_SCORE_THRESHOLD
    nms: float = detector.DEFAULT_PREDICT_NMS


def fuse_predictions(global_dets: DetectionSet, personal_dets: DetectionSet, method="wbf", iou_threshold=None):
    """Tag the two models' boxes with model ids 0 (global) / 1 (personal) and fuse."""
    pooled = DetectionSet.concat([global_dets.with_model_id(0), personal_dets.with_model_id(1)])
    if len(pooled) == 0:
        return DetectionSet()
    return boxkit.fuse(pooled, method, iou_threshold, num_models=2)


def ensemble_predict(ensemble: EnsembleModel, image, thresholds: Thresholds = Thresholds(), method="wbf"):
    g = detector.predict(ensemble.global_model, image, thresholds.score, thresholds.nms)
    p = detector.predict(ensemble.personal, image, thresholds.score, thresholds.nms)
    iou = ensemble.iou_threshold if method == "wbf" else None
    return fuse_predictions(g, p, method, iou)


def ensemble_predict_batch(ensemble: EnsembleModel, images, thresholds: Thresholds = Thresholds(), method="wbf"):
    g = detector.predict_batch(ensemble.global_model, images, thresholds.score, thresholds.nms)
    p = detector.predict_batch(ensemble.personal, images, thresholds.score, thresholds.nms)
    iou = ensemble.iou_threshold if method == "wbf" else None
    return [fuse_predictions(a, b, method, iou) for a, b in zip(g, p)]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(state: FederationState, path) -> Path:
    """Write round_<t>/global.ckpt, round_<t>/client_<i>.ckpt, base.ckpt, messages.log, state.json."""
    root = Path(path)
    rdir = root / f"round_{state.round}"
    rdir.mkdir(parents=True, exist_ok=True)
    state.global_model.save(rdir / "global.ckpt")
    for c, m in sorted(state.client_models.items()):
        m.save(rdir / f"client_{c}.ckpt")
    state.base_model.save(root / "base.ckpt")
    with (root / "messages.log").open("w") as fh:
        for msg in state.message_log:
            fh.write(json.dumps(msg.to_json(), sort_keys=True) + "\n")
    meta = {
        "round": state.round,
        "rng_seed": state.rng_seed,
        "clients": sorted(state.client_models),
        "messages": len(state.message_log),
    }
    (root / "state.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return rdir


def load_checkpoint(path, round_index: int | None = None) -> FederationState:
    """Rebuild the state at ``round_index`` (default: the round in state.json)."""
    root = Path(path)
    meta_path = root / "state.json"
    if not meta_path.exists():
        raise tnn.CheckpointError(f"no federation checkpoint at {root} (state.json missing)")
    try:
        meta = json.loads(meta_path.read_text())
    except ValueError as exc:
        raise tnn.CheckpointError(f"corrupt state.json: {exc}") from exc
    t = meta["round"] if round_index is None else round_index
    rdir = root / f"round_{t}"
    if not rdir.is_dir():
        raise tnn.CheckpointError(f"round {t} not present under {root}")
    base = DetectorModel.load(root / "base.ckpt")
    global_model = DetectorModel.load(rdir / "global.ckpt", expect=base.arch)
    clients = {}
    for f in sorted(rdir.glob("client_*.ckpt")):
        clients[int(f.stem.split("_")[1])] = DetectorModel.load(f, expect=base.arch)
    messages = []
    log_path = root / "messages.log"
    if log_path.exists():
        for line_no, line in enumerate(log_path.read_text().splitlines(), 1):
            try:
                messages.append(Message.from_json(json.loads(line)))
            except (ValueError, KeyError) as exc:
                raise tnn.CheckpointError(f"messages.log line {line_no} unreadable: {exc}") from exc
    messages = [m for m in messages if m.round <= t]
    return FederationState(t, global_model, clients, base, messages, meta["rng_seed"])
