"""End-to-end stacked model: joint encoder + GP training on the marginal
likelihood, posterior-mean feature stacking, forest fitting, metrics, the
seven ablation variants, and county-level aggregation.

Training runs in three phases. Phase 1 optimizes the sequence encoder
parameters and the GP hyperparameters together with one Adam loop on the
negative marginal log likelihood over [z ; static]. Phase 2 computes the
GP's in-sample posterior means (optionally out-of-fold). Phase 3 fits the
forest on [z ; static ; posterior mean]. Ablation variants drop components:
without the encoder, z becomes the 9 per-channel 30-day weather means;
without the GP, the encoder trains against a linear head by mean squared
error and the posterior-mean column disappears; without the forest, the
prediction is the GP posterior mean itself.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import encoder as enc
from . import gp
from . import numcore as nc
from .dataio import CountySummary, Dataset, split_dataset
from .errors import (
    DimensionMismatch,
    Divergence,
    EmptySplit,
    LengthMismatch,
    NonFiniteInput,
    UnknownVariant,
    ZeroVarianceTruth,
)
from .forest import Forest, ForestConfig, RegressionTree, fit_forest, predict_forest
from .optim import Adam, OptimizerConfig

VARIANTS = (
    "full", "no-bilstm", "no-gpr", "no-rf",
    "no-bilstm-gpr", "no-bilstm-rf", "no-gpr-rf",
)
MODEL_FORMAT = "mvelma-model-v1"


def variant_components(tag: str):
    """(uses_encoder, uses_gp, uses_forest) for an ablation tag."""
    if tag not in VARIANTS:
        raise UnknownVariant(f"unknown ablation variant {tag!r}; choose from {VARIANTS}")
    removed = set() if tag == "full" else set(tag.split("-")[1:])
    return "bilstm" not in removed, "gpr" not in removed, "rf" not in removed


@dataclass
class PipelineConfig:
    encoder: enc.EncoderConfig = field(default_factory=enc.EncoderConfig)
    kernel_family: str = "matern25"
    gp_opt: OptimizerConfig = field(default_factory=OptimizerConfig)
    forest: ForestConfig = field(default_factory=ForestConfig)
    gp_input: str = "stacked"  # GP sees [z ; static] ("stacked") or z alone ("latent")
    rf_target: str = "direct"  # forest fits y ("direct") or y - mu ("residual")
    ablation: str = "full"
    train_fraction: float = 0.8
    split_seed: int = 0
    standardize_weather: bool = True
    standardize_enriched: bool = True
    oof_folds: int = 0  # >= 2 enables out-of-fold posterior means for the stack

    def __post_init__(self):
        variant_components(self.ablation)
        if self.gp_input not in ("stacked", "latent"):
            raise UnknownVariant(f"unknown gp_input mode {self.gp_input!r}")
        if self.rf_target not in ("direct", "residual"):
            raise UnknownVariant(f"unknown rf_target mode {self.rf_target!r}")


@dataclass
class Standardizer:
    """Column z-scoring with the fitted statistics kept for prediction time."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        x = np.asarray(x, dtype=np.float64).reshape(-1, x.shape[-1])
        std = x.std(axis=0)
        std = np.where(std < 1e-12, 1.0, std)
        return cls(mean=x.mean(axis=0), std=std)

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std


@dataclass
class TrainedModel:
    config: PipelineConfig
    weather_std: Standardizer | None
    enriched_std: Standardizer | None
    encoder_params: enc.EncoderParams | None
    gp_state: gp.GPState | None
    forest: Forest | None
    head: np.ndarray | None  # latent+1 weights of the encoder-only linear head
    sigma_ref: float
    train_event_ids: list
    test_event_ids: list
    loss_trace: list


@dataclass
class Prediction:
    event_ids: list
    yhat: np.ndarray
    gp_mean: np.ndarray
    gp_variance: np.ndarray
    confidence: np.ndarray


@dataclass
class Metrics:
    mae: float
    r2: float
    mape_pct: float
    nrmse: float
    mape_excluded: int = 0


# ---------------------------------------------------------------------------
# Metrics and confidence
# ---------------------------------------------------------------------------


def evaluate(pred, truth) -> Metrics:
    """MAE, R^2, MAPE (%), and NRMSE (RMSE over the population std of the
    truth). Zero-truth entries are excluded from the MAPE average and
    counted with a warning."""
    p = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(truth, dtype=np.float64).ravel()
    if p.size != y.size or p.size == 0:
        raise LengthMismatch(f"{p.size} predictions vs {y.size} truths")
    sd = float(y.std())
    if sd == 0.0:
        raise ZeroVarianceTruth("R^2 and NRMSE are undefined for constant truth")
    err = p - y
    mae = float(np.abs(err).mean())
    r2 = 1.0 - float((err * err).sum()) / float(((y - y.mean()) ** 2).sum())
    nonzero = y != 0.0
    excluded = int(y.size - nonzero.sum())
    if excluded:
        warnings.warn(f"{excluded} zero-truth value(s) excluded from MAPE")
    mape = 100.0 * float(np.abs(err[nonzero] / y[nonzero]).mean())
    nrmse = float(np.sqrt((err * err).mean())) / sd
    return Metrics(mae=mae, r2=r2, mape_pct=mape, nrmse=nrmse, mape_excluded=excluded)


def confidence_from_variance(variance, sigma_ref: float) -> np.ndarray:
    """Linear map from posterior sd to [0, 1]: 1 - min(sigma/sigma_ref, 1)."""
    var = np.maximum(np.asarray(variance, dtype=np.float64), 0.0)
    sd = np.sqrt(var)
    if sigma_ref <= 0.0:
        return np.where(sd == 0.0, 1.0, 0.0)
    return 1.0 - np.minimum(sd / sigma_ref, 1.0)


# ---------------------------------------------------------------------------
# Training internals
# ---------------------------------------------------------------------------


def _adam_descent(step_fn, x0, opt: OptimizerConfig):
    """Adam with patience early stopping and best-restore; the returned
    trace ends with the restored best loss. step_fn(vec) -> (loss, grad)."""
    vec = np.asarray(x0, dtype=np.float64).copy()
    adam = Adam(vec.size, opt)
    best = (np.inf, vec.copy())
    trace, stale = [], 0
    for _ in range(opt.max_epochs):
        if not np.all(np.isfinite(vec)):
            raise Divergence("parameters became non-finite during fitting")
        try:
            loss, grad = step_fn(vec)
        except NonFiniteInput as e:
            raise Divergence(f"training loss overflowed: {e}") from e
        if not math.isfinite(loss):
            raise Divergence(f"training loss became non-finite ({loss})")
        trace.append(loss)
        if loss < best[0] - opt.min_delta:
            best = (loss, vec.copy())
            stale = 0
        elif loss < best[0]:
            best = (loss, vec.copy())
            stale += 1
        else:
            stale += 1
        if stale >= opt.patience:
            break
        vec = adam.step(vec, grad)
    if not trace or trace[-1] != best[0]:
        trace.append(best[0])
    return best[1], trace


def _channel_means(weather3: np.ndarray) -> np.ndarray:
    return weather3.mean(axis=1)


def _gp_inputs(z: np.ndarray, static: np.ndarray, mode: str) -> np.ndarray:
    return z if mode == "latent" else np.hstack([z, static])


def _encode(params: enc.EncoderParams, weather3: np.ndarray) -> np.ndarray:
    return enc.forward(params, weather3, nc.Tape()).Z


def _train_joint_phase(weather3, static, y, cfg: PipelineConfig):
    """Encoder params and GP hyperparameters under one Adam loop on the NMLL."""
    params0 = enc.init_params(cfg.encoder)
    x0 = _gp_inputs(_encode(params0, weather3), static, cfg.gp_input)
    gp0 = gp.init_state(x0, y, cfg.kernel_family)
    n_enc = params0.flatten().size

    def step(vec):
        tape = nc.Tape()
        params = enc.EncoderParams.from_flat(cfg.encoder, vec[:n_enc])
        out = enc.forward(params, weather3, tape)
        if cfg.gp_input == "latent":
            x_node = out.latent
        else:
            x_node = nc.concat_cols([out.latent, tape.constant(static)])
        h = gp.hypers_to_nodes(tape, gp0.with_hypers_flat(vec[n_enc:]))
        loss_node = gp.nmll_node(tape, h, x_node, y)
        loss = loss_node.value.item()
        if not math.isfinite(loss):
            return loss, None
        nc.backward(tape, loss_node)
        return loss, np.concatenate([out.leaves.grads_flat(), h.grads_flat()])

    vec0 = np.concatenate([params0.flatten(), gp0.hypers_flat()])
    best, trace = _adam_descent(step, vec0, cfg.gp_opt)
    params = enc.EncoderParams.from_flat(cfg.encoder, best[:n_enc])
    x = _gp_inputs(_encode(params, weather3), static, cfg.gp_input)
    state = gp0.with_hypers_flat(best[n_enc:]).refresh(x, y)
    return params, state, trace


def _train_mse_phase(weather3, y, cfg: PipelineConfig):
    """Encoder plus a linear head trained by mean squared error; used when
    the GP is ablated away and the encoder has no likelihood to descend."""
    params0 = enc.init_params(cfg.encoder)
    n_enc = params0.flatten().size
    d = cfg.encoder.latent
    rng = np.random.default_rng(cfg.encoder.seed + 1)
    head0 = np.concatenate([rng.uniform(-1.0, 1.0, d) / math.sqrt(d), [0.0]])
    y_col = y.reshape(-1, 1)

    def step(vec):
        tape = nc.Tape()
        params = enc.EncoderParams.from_flat(cfg.encoder, vec[:n_enc])
        out = enc.forward(params, weather3, tape)
        w = tape.leaf(vec[n_enc:n_enc + d].reshape(-1, 1))
        b = tape.leaf(vec[n_enc + d:].reshape(1, 1))
        diff = nc.sub(nc.add(nc.matmul(out.latent, w), b), tape.constant(y_col))
        loss_node = nc.scale(nc.sum_all(nc.mul(diff, diff)), 1.0 / y.size)
        loss = loss_node.value.item()
        if not math.isfinite(loss):
            return loss, None
        nc.backward(tape, loss_node)
        grad = np.concatenate([out.leaves.grads_flat(), w.grad.ravel(), b.grad.ravel()])
        return loss, grad

    vec0 = np.concatenate([params0.flatten(), head0])
    best, trace = _adam_descent(step, vec0, cfg.gp_opt)
    return enc.EncoderParams.from_flat(cfg.encoder, best[:n_enc]), best[n_enc:], trace


def _oof_means(state: gp.GPState, x: np.ndarray, y: np.ndarray, folds: int, seed: int):
    """Out-of-fold posterior means with hyperparameters held fixed."""
    n = x.shape[0]
    order = np.random.default_rng(seed).permutation(n)
    mu = np.empty(n)
    for f in range(folds):
        hold = order[f::folds]
        keep = np.setdiff1d(order, hold)
        st = state.refresh(x[keep], y[keep])
        mu[hold] = gp.posterior(st, x[hold]).mean
    return mu


def train_joint(data: Dataset, cfg: PipelineConfig | None = None) -> TrainedModel:
    """Split the dataset, run the three training phases on the train part,
    and return a model that remembers both split id sets."""
    cfg = cfg or PipelineConfig()
    if data.n < 2:
        raise EmptySplit("need at least 2 events to hold out a test split")
    train, test = split_dataset(data, cfg.train_fraction, cfg.split_seed)
    if train.n == 0:
        raise EmptySplit("train split is empty")
    uses_encoder, uses_gp, uses_forest = variant_components(cfg.ablation)

    weather_std = Standardizer.fit(train.weather) if cfg.standardize_weather else None
    enriched_std = Standardizer.fit(train.enriched) if cfg.standardize_enriched else None
    w3 = weather_std.transform(train.weather) if weather_std else train.weather
    static = enriched_std.transform(train.enriched) if enriched_std else train.enriched
    y = train.targets

    encoder_params, gp_state, head, trace = None, None, None, []
    if uses_encoder and uses_gp:
        encoder_params, gp_state, trace = _train_joint_phase(w3, static, y, cfg)
        z = _encode(encoder_params, w3)
    elif uses_encoder:
        encoder_params, head, trace = _train_mse_phase(w3, y, cfg)
        z = _encode(encoder_params, w3)
    else:
        z = _channel_means(w3)
        if uses_gp:
            x = _gp_inputs(z, static, cfg.gp_input)
            gp_state, trace = gp.fit(
                gp.init_state(x, y, cfg.kernel_family), x, y, cfg.gp_opt
            )

    sigma_ref = 0.0
    forest = None
    if uses_gp:
        x = _gp_inputs(z, static, cfg.gp_input)
        post = gp.posterior(gp_state, x)
        sigma_ref = float(np.sqrt(np.maximum(post.variance, 0.0)).max())
        if cfg.oof_folds >= 2:
            mu = _oof_means(gp_state, x, y, cfg.oof_folds, cfg.split_seed)
        else:
            mu = post.mean
        if uses_forest:
            stack = np.hstack([z, static, mu.reshape(-1, 1)])
            rf_y = y - mu if cfg.rf_target == "residual" else y
            forest = fit_forest(stack, rf_y, cfg.forest)
    elif uses_forest:
        forest = fit_forest(np.hstack([z, static]), y, cfg.forest)

    return TrainedModel(
        config=cfg,
        weather_std=weather_std,
        enriched_std=enriched_std,
        encoder_params=encoder_params,
        gp_state=gp_state,
        forest=forest,
        head=head,
        sigma_ref=sigma_ref,
        train_event_ids=[e.event_id for e in train.events],
        test_event_ids=[e.event_id for e in test.events],
        loss_trace=[float(v) for v in trace],
    )


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------


def predict(model: TrainedModel, data: Dataset) -> Prediction:
    """Run the trained stack on a dataset. Variants without the GP report
    zero predictive variance (confidence 1)."""
    cfg = model.config
    uses_encoder, uses_gp, uses_forest = variant_components(cfg.ablation)
    if data.weather.shape[1:] != (cfg.encoder.seq_len, cfg.encoder.input_width):
        raise DimensionMismatch(
            f"weather block {data.weather.shape[1:]} does not match "
            f"({cfg.encoder.seq_len}, {cfg.encoder.input_width})"
        )
    w3 = model.weather_std.transform(data.weather) if model.weather_std else data.weather
    static = (
        model.enriched_std.transform(data.enriched) if model.enriched_std else data.enriched
    )
    if uses_encoder:
        z = _encode(model.encoder_params, w3)
    else:
        z = _channel_means(w3)

    n = data.n
    if uses_gp:
        post = gp.posterior(model.gp_state, _gp_inputs(z, static, cfg.gp_input))
        mu, var = post.mean, np.maximum(post.variance, 0.0)
        conf = confidence_from_variance(var, model.sigma_ref)
    if uses_gp and uses_forest:
        rf_out = predict_forest(model.forest, np.hstack([z, static, mu.reshape(-1, 1)]))
        yhat = mu + rf_out if cfg.rf_target == "residual" else rf_out
    elif uses_gp:
        yhat = mu.copy()
    elif uses_forest:
        yhat = predict_forest(model.forest, np.hstack([z, static]))
    else:
        yhat = z @ model.head[:-1] + model.head[-1]
    if not uses_gp:
        mu, var, conf = yhat.copy(), np.zeros(n), np.ones(n)

    return Prediction(
        event_ids=[e.event_id for e in data.events],
        yhat=np.asarray(yhat, dtype=np.float64),
        gp_mean=mu,
        gp_variance=var,
        confidence=conf,
    )


def subset_by_ids(data: Dataset, event_ids) -> Dataset:
    lookup = {e.event_id: i for i, e in enumerate(data.events)}
    return data.subset([lookup[eid] for eid in event_ids])


def run_ablation(data: Dataset, variant: str, cfg: PipelineConfig | None = None) -> Metrics:
    """Train one variant on the configured split and return test metrics."""
    cfg = replace(cfg, ablation=variant) if cfg else PipelineConfig(ablation=variant)
    model = train_joint(data, cfg)
    test = subset_by_ids(data, model.test_event_ids)
    pred = predict(model, test)
    return evaluate(pred.yhat, test.targets)


def aggregate_county(events, observed, predicted, confidence):
    """Per-county arithmetic means, sorted ascending by county id."""
    groups: dict = {}
    for ev, o, p, c in zip(events, observed, predicted, confidence):
        groups.setdefault(ev.county_id, []).append((o, p, c))
    out = []
    for cid in sorted(groups):
        arr = np.array(groups[cid])
        out.append(CountySummary(
            county_id=cid,
            opfvl=float(arr[:, 0].mean()),
            ppvl=float(arr[:, 1].mean()),
            apc=float(arr[:, 2].mean()),
        ))
    return out


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _std_doc(s: Standardizer | None):
    return None if s is None else {"mean": s.mean.tolist(), "std": s.std.tolist()}


def _std_from(doc):
    return None if doc is None else Standardizer(
        mean=np.asarray(doc["mean"]), std=np.asarray(doc["std"])
    )


def save_model(model: TrainedModel, path) -> None:
    """Write the model as self-describing JSON. Floats round-trip exactly;
    the GP's Cholesky factor is recomputed on load."""
    gp_doc = None
    if model.gp_state is not None:
        st = model.gp_state
        gp_doc = {
            "kernel": asdict(st.kernel),
            "log_noise": st.log_noise,
            "mean_const": st.mean_const,
            "train_inputs": st.train_inputs.tolist(),
            "train_targets": st.train_targets.tolist(),
        }
    forest_doc = None
    if model.forest is not None:
        forest_doc = {
            "config": asdict(model.forest.config),
            "importances": model.forest.importances.tolist(),
            "n_features": model.forest.n_features,
            "trees": [
                {
                    "feature": t.feature.tolist(),
                    "threshold": t.threshold.tolist(),
                    "left": t.left.tolist(),
                    "right": t.right.tolist(),
                    "value": t.value.tolist(),
                }
                for t in model.forest.trees
            ],
        }
    doc = {
        "format": MODEL_FORMAT,
        "config": asdict(model.config),
        "weather_std": _std_doc(model.weather_std),
        "enriched_std": _std_doc(model.enriched_std),
        "encoder_params": None
        if model.encoder_params is None
        else model.encoder_params.flatten().tolist(),
        "gp": gp_doc,
        "forest": forest_doc,
        "head": None if model.head is None else model.head.tolist(),
        "sigma_ref": model.sigma_ref,
        "train_event_ids": model.train_event_ids,
        "test_event_ids": model.test_event_ids,
        "loss_trace": model.loss_trace,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f)


def _config_from_doc(d) -> PipelineConfig:
    return PipelineConfig(
        encoder=enc.EncoderConfig(**d["encoder"]),
        kernel_family=d["kernel_family"],
        gp_opt=OptimizerConfig(**d["gp_opt"]),
        forest=ForestConfig(**d["forest"]),
        gp_input=d["gp_input"],
        rf_target=d["rf_target"],
        ablation=d["ablation"],
        train_fraction=d["train_fraction"],
        split_seed=d["split_seed"],
        standardize_weather=d["standardize_weather"],
        standardize_enriched=d["standardize_enriched"],
        oof_folds=d["oof_folds"],
    )


def load_model(path) -> TrainedModel:
    from .errors import SchemaError

    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("format") != MODEL_FORMAT:
        raise SchemaError(f"unsupported model format {doc.get('format')!r}")
    cfg = _config_from_doc(doc["config"])

    gp_state = None
    if doc["gp"] is not None:
        d = doc["gp"]
        gp_state = gp.GPState(
            kernel=gp.KernelSpec(**d["kernel"]),
            log_noise=d["log_noise"],
            mean_const=d["mean_const"],
        ).refresh(np.asarray(d["train_inputs"]), np.asarray(d["train_targets"]))

    forest = None
    if doc["forest"] is not None:
        d = doc["forest"]
        forest = Forest(
            trees=[
                RegressionTree(
                    feature=np.asarray(t["feature"], dtype=np.int64),
                    threshold=np.asarray(t["threshold"], dtype=np.float64),
                    left=np.asarray(t["left"], dtype=np.int64),
                    right=np.asarray(t["right"], dtype=np.int64),
                    value=np.asarray(t["value"], dtype=np.float64),
                )
                for t in d["trees"]
            ],
            importances=np.asarray(d["importances"], dtype=np.float64),
            n_features=d["n_features"],
            config=ForestConfig(**d["config"]),
        )

    return TrainedModel(
        config=cfg,
        weather_std=_std_from(doc["weather_std"]),
        enriched_std=_std_from(doc["enriched_std"]),
        encoder_params=None
        if doc["encoder_params"] is None
        else enc.EncoderParams.from_flat(cfg.encoder, np.asarray(doc["encoder_params"])),
        gp_state=gp_state,
        forest=forest,
        head=None if doc["head"] is None else np.asarray(doc["head"]),
        sigma_ref=doc["sigma_ref"],
        train_event_ids=list(doc["train_event_ids"]),
        test_event_ids=list(doc["test_event_ids"]),
        loss_trace=list(doc["loss_trace"]),
    )
