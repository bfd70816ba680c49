"""End-to-end pipeline: benchmark, base model, federation, ensembles, indicator tables."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

from . import boxkit, datagen, detector, federation, metrics
from .detector import DetectorModel, TrainConfig
from .distill import DistillConfig
from .federation import EnsembleModel, FederationConfig, FederationData, Thresholds

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    seed: int = 0
    rounds: int = 3
    server_train: int = 2000
    server_test: int = 400
    client_train: int = 150
    client_test: int = 100
    base: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=12, lr=0.05))
    local: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=12, lr=0.05))
    distill: DistillConfig = field(default_factory=DistillConfig)
    alphas: tuple[float, ...] = metrics.DEFAULT_ALPHAS
    score_threshold: float = detector.DEFAULT_SCORE_THRESHOLD
    nms_threshold: float = detector.DEFAULT_PREDICT_NMS
    wbf_threshold: float = federation.ENSEMBLE_WBF_IOU
    fedavg: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["alphas"] = list(self.alphas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        for key, typ in (("base", TrainConfig), ("local", TrainConfig), ("distill", DistillConfig)):
            if isinstance(d.get(key), dict):
                d[key] = typ(**d[key])
        if "alphas" in d:
            d["alphas"] = tuple(d["alphas"])
        return cls(**d)

    @property
    def thresholds(self) -> Thresholds:
        return Thresholds(self.score_threshold, self.nms_threshold)


class ModelPredictor:
    """Batch predictor with a per-image-array cache (arrays are keyed by identity)."""

    def __init__(self, model: DetectorModel, thresholds: Thresholds = Thresholds()):
        self.model = model
        self.thresholds = thresholds
        self._cache: dict[tuple, tuple[object, list]] = {}

    def __call__(self, images):
        key = (id(images), images.shape)
        hit = self._cache.get(key)
        if hit is None or hit[0] is not images:
            preds = detector.predict_batch(self.model, images, self.thresholds.score, self.thresholds.nms)
            self._cache[key] = (images, preds)
            return preds
        return hit[1]


class FusedPredictor:
    """Fuses the outputs of a global (model id 0) and a personal (model id 1) predictor."""

    def __init__(self, global_pred: ModelPredictor, personal_pred: ModelPredictor, method="wbf", iou_threshold=None):
        self.global_pred = global_pred
        self.personal_pred = personal_pred
        self.method = method
        self.iou_threshold = iou_threshold

    def __call__(self, images):
        return [
            federation.fuse_predictions(g, p, self.method, self.iou_threshold)
            for g, p in zip(self.global_pred(images), self.personal_pred(images))
        ]


def train_base(bench: datagen.Benchmark, cfg: TrainConfig, seed: int, loss_log: list | None = None) -> DetectorModel:
    init = DetectorModel.init(seed)
    return detector.train_local(init, bench.server_train, cfg.epochs, cfg.lr, seed, cfg.batch_size, log=loss_log)


def federation_data(bench: datagen.Benchmark) -> FederationData:
    return FederationData(bench.server_train, dict(bench.client_train))


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    columns: dict[str, metrics.FedIndicators]  # Table 1 structure, in order
    fusion: dict[str, metrics.FedIndicators]  # Table 2: method -> indicators of the final ensembles
    fedavg_global: metrics.FedIndicators | None
    base_per_testset: dict[str, float]  # w_b mAP on each testset
    timings: dict[str, float]
    base_loss: list[float] = field(default_factory=list)
    distill_log: list[dict] = field(default_factory=list)


def evaluate_columns(
    bench: datagen.Benchmark,
    base: DetectorModel,
    records: list[federation.RoundRecord],
    ensembles: dict[int, EnsembleModel],
    cfg: ExperimentConfig,
) -> dict[str, metrics.FedIndicators]:
    """Indicators for w_b, w^1_i, E(w^1_i, w_b) and per round w^t_g, w^{t+1}_i, E(w^{t+1}_i, w^t_g)."""
    th = cfg.thresholds
    preds: dict[str, ModelPredictor] = {}

    def pred(model: DetectorModel) -> ModelPredictor:
        key = model.checksum()
        if key not in preds:
            preds[key] = ModelPredictor(model, th)
        return preds[key]

    clients = bench.client_ids
    ev = lambda ps: metrics.compute_indicators(ps, bench.server_test, bench.client_test, cfg.alphas)  # noqa: E731
    base_p = pred(base)
    cols = {"w_b": ev({c: base_p for c in clients})}
    first = records[0].client_models
    cols["w^1_i"] = ev({c: pred(first[c]) for c in clients})
    cols["E(w^1_i,w_b)"] = ev({c: FusedPredictor(base_p, pred(first[c]), "wbf", cfg.wbf_threshold) for c in clients})
    for t, rec in enumerate(records, 1):
        g = pred(rec.global_model)
        cols[f"w^{t}_g"] = ev({c: g for c in clients})
        nxt = records[t].client_models if t < len(records) else {c: ensembles[c].personal for c in clients}
        cols[f"w^{t + 1}_i"] = ev({c: pred(nxt[c]) for c in clients})
        cols[f"E(w^{t + 1}_i,w^{t}_g)"] = ev(
            {c: FusedPredictor(g, pred(nxt[c]), "wbf", cfg.wbf_threshold) for c in clients}
        )
    return cols


def fusion_comparison(
    bench: datagen.Benchmark, ensembles: dict[int, EnsembleModel], cfg: ExperimentConfig
) -> dict[str, metrics.FedIndicators]:
    """Indicators of the final ensembles under each of the four box-fusion methods."""
    th = cfg.thresholds
    per_client = {c: (ModelPredictor(e.global_model, th), ModelPredictor(e.personal, th)) for c, e in ensembles.items()}
    # the global model is shared; reuse one predictor for it
    shared = per_client[min(per_client)][0]
    out = {}
    for method in boxkit.FUSION_METHODS:
        iou = cfg.wbf_threshold if method == "wbf" else None
        ps = {c: FusedPredictor(shared, p, method, iou) for c, (_, p) in per_client.items()}
        out[method] = metrics.compute_indicators(ps, bench.server_test, bench.client_test, cfg.alphas)
    return out


def run_experiment(cfg: ExperimentConfig, bench: datagen.Benchmark | None = None) -> ExperimentResult:
    timings = {}
    t0 = time.perf_counter()
    if bench is None:
        bench = datagen.build_benchmark(
            cfg.seed, cfg.server_train, cfg.server_test, cfg.client_train, cfg.client_test
        )
    timings["data"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    base_loss: list[float] = []
    base = train_base(bench, cfg.base, cfg.seed, base_loss)
    timings["base"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    data = federation_data(bench)
    fcfg = FederationConfig(cfg.rounds, cfg.seed, cfg.local, cfg.distill, "distill")
    state, records = federation.run_federation(base, data, fcfg)
    ensembles = {
        c: federation.ensemble_step(state, c, bench.client_train[c], cfg.local, cfg.wbf_threshold)
        for c in bench.client_ids
    }
    timings["fedod"] = time.perf_counter() - t0

    fedavg_ind = None
    if cfg.fedavg:
        t0 = time.perf_counter()
        fa_state, _ = federation.run_federation(
            base, data, FederationConfig(cfg.rounds, cfg.seed, cfg.local, cfg.distill, "fedavg")
        )
        g = ModelPredictor(fa_state.global_model, cfg.thresholds)
        fedavg_ind = metrics.compute_indicators(
            {c: g for c in bench.client_ids}, bench.server_test, bench.client_test, cfg.alphas
        )
        timings["fedavg"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    cols = evaluate_columns(bench, base, records, ensembles, cfg)
    fusion = fusion_comparison(bench, ensembles, cfg)
    bp = ModelPredictor(base, cfg.thresholds)
    base_per = {"server": metrics.evaluate(bp(bench.server_test.images), bench.server_test.ground_truth).map_value}
    for c in bench.client_ids:
        t = bench.client_test[c]
        base_per[f"client_{c}"] = metrics.evaluate(bp(t.images), t.ground_truth).map_value
    timings["evaluate"] = time.perf_counter() - t0

    distill_rows = [row for rec in records for row in rec.distill_log]
    log.info("experiment seed=%d timings=%s", cfg.seed, timings)
    return ExperimentResult(cfg, cols, fusion, fedavg_ind, base_per, timings, base_loss, distill_rows)
