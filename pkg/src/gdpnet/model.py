"""Full graph engine: latent adjacency, D alternations of convolution and
pooling, pooled-graph readout, classifier, joint loss, and the trainer.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from . import dtwpool, gaussian_graph, graphconv
from .data import Dataset, TokenSequence, accuracy, micro_f1
from .diffcore import ParamStore, Tensor


class NanLossError(RuntimeError):
    def __init__(self, example_id: str):
        super().__init__(f"non-finite loss on example {example_id!r}")
        self.example_id = example_id


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    d: int = 300                  # node feature width inside the graph
    g: int = 64                   # Gaussian / edge-score width
    views: int = 3
    sublayers: int = 2
    stages: int = 3               # pooling stages; 0 = no-pooling ablation
    ratio: float = 0.7            # per-view pooling lower bound
    gamma: float = 1.0
    dtw_weight: float = 1e-6
    n_classes: int = 2
    dropout: float = 0.5
    lr: float = 3e-5
    batch_size: int = 24
    epochs: int = 20
    seed: int = 1
    adjacency_norm: str = "softmax"
    regenerate_edges: bool = False
    attention_edges: bool = False
    trainable_h0: bool = False
    d_in: int = 0                 # input embedding width, set from the data
    early_stop_accuracy: float | None = None
    clip_norm: float = 5.0        # global gradient-norm cap; 0 disables

    def validate(self) -> None:
        if self.views < 1:
            raise ConfigError("views must be >= 1")
        if self.stages < 0:
            raise ConfigError("stages must be >= 0")
        if not 0.0 < self.ratio <= 1.0:
            raise ConfigError("ratio must be in (0, 1]")
        if self.gamma <= 0.0:
            raise ConfigError("gamma must be positive")
        if self.dtw_weight < 0.0:
            raise ConfigError("dtw_weight must be >= 0")
        if self.d % self.sublayers != 0:
            raise ConfigError(f"d={self.d} not divisible by sublayers={self.sublayers}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.n_classes < 2:
            raise ConfigError("need at least two classes")
        if self.d_in < 1:
            raise ConfigError("d_in must be set from the data")
        if self.adjacency_norm not in ("softmax", "row_sum", "none"):
            raise ConfigError(f"unknown adjacency_norm {self.adjacency_norm!r}")

    @property
    def n_conv_stages(self) -> int:
        return max(self.stages, 1)


@dataclass
class StageTrace:
    survivors: np.ndarray        # original positions, strictly increasing
    features: Tensor             # pooled node features, (K, d)
    r_real: float


@dataclass
class ForwardRecord:
    logits: Tensor
    h_final: Tensor
    v1: Tensor                   # post-first-convolution features, all nodes
    stages: list[StageTrace] = field(default_factory=list)

    @property
    def realized_ratios(self) -> list[float]:
        return [s.r_real for s in self.stages]

    def final_survivors(self, n_nodes: int) -> np.ndarray:
        if self.stages:
            return self.stages[-1].survivors
        return np.arange(1, n_nodes + 1)

    @property
    def prediction(self) -> int:
        return int(np.argmax(self.logits.data))


def init_params(config: ModelConfig, rng: np.random.Generator) -> ParamStore:
    config.validate()
    store = ParamStore()
    store.add("in.W", dc.xavier_uniform(rng, config.d_in, config.d))
    store.add("in.b", np.zeros(config.d))
    if config.trainable_h0:
        store.add("h0", np.zeros((1, config.d_in)))
    if config.attention_edges:
        for n in range(config.views):
            store.add(f"attn.v{n}.q.W", dc.xavier_uniform(rng, config.d, config.g))
            store.add(f"attn.v{n}.k.W", dc.xavier_uniform(rng, config.d, config.g))
    else:
        gaussian_graph.init_gaussian_params(store, config.d, config.g, config.views, rng)
    for stage in range(1, config.n_conv_stages + 1):
        graphconv.init_conv_params(store, stage, config.d, config.views,
                                   config.sublayers, rng)
    if config.stages >= 1:
        dtwpool.init_pool_params(store, config.d, rng)
    store.add("f.W", dc.xavier_uniform(rng, config.n_conv_stages * config.d, config.d))
    store.add("f.b", np.zeros(config.d))
    store.add("cls.W", dc.xavier_uniform(rng, config.d_in + config.d, config.n_classes))
    store.add("cls.b", np.zeros(config.n_classes))
    return store


def check_compat(store: ParamStore, config: ModelConfig, dataset: Dataset) -> None:
    w = store["in.W"].data
    if w.shape != (dataset.d_in, config.d):
        raise ConfigError(
            f"checkpoint expects input width {w.shape[0]} and node width "
            f"{w.shape[1]}, got data width {dataset.d_in} and config d={config.d}")
    cls_w = store["cls.W"].data
    if cls_w.shape[1] != dataset.n_classes:
        raise ConfigError(
            f"checkpoint has {cls_w.shape[1]} classes, data has {dataset.n_classes}")


def _raw_edge_scores(feats: Tensor, store: ParamStore,
                     config: ModelConfig) -> list[Tensor]:
    """Per-view directed raw edge scores before row normalization."""
    if config.attention_edges:
        scale = 1.0 / np.sqrt(config.g)
        out = []
        for n in range(config.views):
            q = dc.matmul(feats, store[f"attn.v{n}.q.W"])
            k = dc.matmul(feats, store[f"attn.v{n}.k.W"])
            out.append(dc.mul_const(dc.matmul(q, transpose(k)), scale))
        return out
    bank = gaussian_graph.encode_gaussians(feats, store, config.views)
    return [gaussian_graph.kl_matrix(mu, sigma) for mu, sigma in bank.views]


def _normalize_all(raw: list[Tensor], config: ModelConfig) -> list[Tensor]:
    # attention-style edges are softmax-normalized by definition
    mode = "softmax" if config.attention_edges else config.adjacency_norm
    return [gaussian_graph.normalize_adjacency(e, mode) for e in raw]


def transpose(a: Tensor) -> Tensor:
    return dc.make_op(a.data.T.copy(), (a,), lambda g: (g.T,))


def forward(example: TokenSequence, store: ParamStore, config: ModelConfig,
            train: bool = False, rng: np.random.Generator | None = None) -> ForwardRecord:
    """Run the graph module on one example.

    The CLS-position row bypasses the graph and is concatenated with the
    pooled-graph readout before the classifier; every other position becomes
    a graph node.
    """
    if example.n_tokens < 1:
        raise ValueError(f"example {example.id!r} has no token positions")
    if example.embeddings.shape[1] != config.d_in:
        raise ConfigError(
            f"example width {example.embeddings.shape[1]} != configured d_in {config.d_in}")
    if train and config.dropout > 0 and rng is None:
        raise ValueError("train-mode forward needs an rng for dropout")

    h0 = store["h0"] if config.trainable_h0 else dc.tensor(example.embeddings[0:1])
    v_in = dc.linear(dc.tensor(example.embeddings[1:]), store["in.W"], store["in.b"])
    raw = _raw_edge_scores(v_in, store, config)
    adjs = _normalize_all(raw, config)
    origin = np.arange(1, example.n_tokens + 2)

    v1: Tensor | None = None
    stages: list[StageTrace] = []
    for stage in range(1, config.n_conv_stages + 1):
        view_outs = [
            graphconv.dense_conv_view(
                adjs[n], v_in, graphconv.stage_weights(store, stage, n, config.sublayers))
            for n in range(config.views)
        ]
        v_conv = graphconv.merge_views(view_outs, store[f"conv{stage}.merge.W"])
        if train and config.dropout > 0:
            keep = rng.random(v_conv.data.shape) >= config.dropout
            v_conv = dc.mul_const(v_conv, keep / (1.0 - config.dropout))
        if stage == 1:
            v1 = v_conv
        if config.stages == 0:
            break
        scores = [dtwpool.sag_scores(adjs[n], v_conv, store["pool.W"], store["pool.b"])
                  for n in range(config.views)]
        sets = [dtwpool.select_topk(scores[n].data, config.ratio)
                for n in range(config.views)]
        pooled, local_idx, r_real = dtwpool.union_pool(sets, v_conv, scores)
        origin = origin[local_idx]
        stages.append(StageTrace(origin.copy(), pooled, r_real))
        if stage < config.n_conv_stages:
            if config.regenerate_edges:
                raw = _raw_edge_scores(pooled, store, config)
            else:
                raw = [graphconv.submatrix(e, local_idx) for e in raw]
            adjs = _normalize_all(raw, config)
        v_in = pooled

    if stages:
        final = stages[-1].survivors
        parts = []
        for st in stages:
            rows = np.searchsorted(st.survivors, final)
            parts.append(dc.take_rows(st.features, rows))
        v_stack = parts[0] if len(parts) == 1 else dc.concat_cols(parts)
    else:
        v_stack = v1
    f_out = dc.col_max(dc.linear(v_stack, store["f.W"], store["f.b"]))
    h_final = dc.concat_cols([h0, f_out])
    logits = dc.linear(h_final, store["cls.W"], store["cls.b"])
    if not np.all(np.isfinite(logits.data)):
        raise NanLossError(example.id)
    return ForwardRecord(logits=logits, h_final=h_final, v1=v1, stages=stages)


def loss(record: ForwardRecord, label: int,
         config: ModelConfig) -> tuple[Tensor, float, float]:
    """Cross entropy plus the weighted alignment distance between the
    first-convolution node sequence and the final pooled node sequence.

    Returns (total, cross-entropy value, alignment value).
    """
    ce = dc.cross_entropy(record.logits, label)
    if config.dtw_weight == 0.0 or not record.stages:
        return ce, ce.item(), 0.0
    dtw = dtwpool.softdtw(record.v1, record.stages[-1].features, config.gamma)
    total = dc.add(ce, dc.mul_const(dtw, config.dtw_weight))
    return total, ce.item(), dtw.item()


def _metrics_line(epoch: int, split: str, vals: dict) -> str:
    def fmt(x):
        return "nan" if x is None else f"{x:.17g}"

    return (f"{epoch}, {split}, {fmt(vals['loss'])}, {fmt(vals['cse'])}, "
            f"{fmt(vals['dtw'])}, {fmt(vals['f1'])}, {fmt(vals['mean_r_real'])}")


def evaluate(dataset: Dataset, store: ParamStore, config: ModelConfig) -> dict:
    """Eval-mode metrics over a split: mean loss terms, micro-F1, accuracy."""
    preds, ratios = [], []
    tot_loss = tot_ce = tot_dtw = 0.0
    with dc.no_grad():
        for ex in dataset.examples:
            rec = forward(ex, store, config, train=False)
            total, ce, dtw = loss(rec, ex.label, config)
            tot_loss += total.item()
            tot_ce += ce
            tot_dtw += dtw
            preds.append(rec.prediction)
            ratios.extend(rec.realized_ratios)
    golds = [ex.label for ex in dataset.examples]
    n = len(dataset.examples)
    _, _, f1 = micro_f1(preds, golds, dataset.no_relation_index)
    return {
        "loss": tot_loss / n, "cse": tot_ce / n, "dtw": tot_dtw / n,
        "f1": f1, "accuracy": accuracy(preds, golds),
        "mean_r_real": float(np.mean(ratios)) if ratios else 1.0,
        "predictions": preds,
    }


def train(train_ds: Dataset, dev_ds: Dataset | None, config: ModelConfig,
          log_fn=None) -> tuple[ParamStore, list[dict], list[str]]:
    """Seeded mini-batch training; returns (params, per-epoch metrics, log lines).

    Aborts with NanLossError naming the offending example when a loss goes
    non-finite.
    """
    if not train_ds.examples:
        raise ConfigError("training dataset is empty")
    config.validate()
    rng = np.random.default_rng(config.seed)
    store = init_params(config, rng)
    history: list[dict] = []
    lines: list[str] = []
    n = len(train_ds.examples)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        preds, golds, ratios = [], [], []
        tot_loss = tot_ce = tot_dtw = 0.0
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            store.zero_grad()
            losses = []
            for idx in batch:
                ex = train_ds.examples[int(idx)]
                rec = forward(ex, store, config, train=True, rng=rng)
                total, ce, dtw = loss(rec, ex.label, config)
                if not np.isfinite(total.data):
                    raise NanLossError(ex.id)
                losses.append(total)
                tot_loss += total.item()
                tot_ce += ce
                tot_dtw += dtw
                preds.append(rec.prediction)
                golds.append(ex.label)
                ratios.extend(rec.realized_ratios)
            dc.mul_const(dc.add_scalars(losses), 1.0 / len(batch)).backward()
            if config.clip_norm > 0:
                try:
                    dc.clip_grad_norm(store, config.clip_norm)
                except dc.NumericError:
                    raise NanLossError(train_ds.examples[int(batch[0])].id) from None
            dc.adam_step(store, config.lr)
        _, _, train_f1 = micro_f1(preds, golds, train_ds.no_relation_index)
        train_vals = {
            "loss": tot_loss / n, "cse": tot_ce / n, "dtw": tot_dtw / n,
            "f1": train_f1,
            "mean_r_real": float(np.mean(ratios)) if ratios else 1.0,
        }
        lines.append(_metrics_line(epoch, "train", train_vals))
        entry = {"epoch": epoch, "train": train_vals}
        if dev_ds is not None and dev_ds.examples:
            dev_vals = evaluate(dev_ds, store, config)
            dev_vals.pop("predictions")
            lines.append(_metrics_line(epoch, "dev", dev_vals))
            entry["dev"] = dev_vals
        history.append(entry)
        if log_fn is not None:
            log_fn(entry)
        if (config.early_stop_accuracy is not None and "dev" in entry
                and entry["dev"]["accuracy"] >= config.early_stop_accuracy):
            break
    return store, history, lines


def predict(dataset: Dataset, store: ParamStore,
            config: ModelConfig) -> tuple[list[int], list[ForwardRecord]]:
    """Eval-mode argmax labels plus the retained forward records."""
    check_compat(store, config, dataset)
    labels, records = [], []
    with dc.no_grad():
        for ex in dataset.examples:
            rec = forward(ex, store, config, train=False)
            labels.append(rec.prediction)
            records.append(rec)
    return labels, records


def ablation_config(base: ModelConfig, variant: str) -> ModelConfig:
    """Structural variants: homogeneous (one view), attention edges instead
    of the Gaussian generator, no alignment loss, no pooling."""
    if variant == "homogeneous":
        return replace(base, views=1)
    if variant == "attention_edges":
        return replace(base, attention_edges=True)
    if variant == "no_dtw_loss":
        return replace(base, dtw_weight=0.0)
    if variant == "no_pooling":
        return replace(base, stages=0)
    raise ValueError(f"unknown ablation variant {variant!r}")
