"""Experiment runners and the command-line front end.

Five subcommands drive the simulator end to end:

- ``synthetic-width``: unit-sphere regression, two-layer nets, sweep the
  hidden width and merge once per width.
- ``synthetic-steps``: same task at fixed width, sweep the local full-batch
  step count.
- ``one-shot``: heterogeneous image classification with an MLP, one round of
  local training and server-side merging per method.
- ``few-shot``: the same pipeline repeated for a few broadcast rounds.
- ``compress-bench``: the one-shot pipeline under payload quantization,
  sweeping the compression factor.

Each subcommand reads an optional INI-style config (flat key=value lines
under [section] headers), applies command-line flag overrides, writes one CSV
row per (seed, method, sweep point), and exits 0 on success, 2 on a config
error, 3 on numerical divergence. Rows are sorted by (seed, method, sweep)
and floats carry 17 significant digits, so identical configs (with wall-time
measurement disabled via --no-timing) produce byte-identical CSVs.

Communication bits count each client's uplink: flat weights plus curvature
payload, after any configured compression. The compressed pipeline quantizes
weights per layer at s_q=2 and diagonal curvature likewise; Kronecker factor
payloads are SVD-truncated to the budget-planned ranks and quantized at the
configured factor s_q, keeping every curvature-carrying method within
32 d + 64 L bits of the 32 d float32 baseline.
"""

from __future__ import annotations

import argparse
import configparser
import sys
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import aggregate as agg
from . import compress as comp
from . import datasets, fisher, models

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

CSV_HEADER = "seed,method,sweep,train_loss,test_accuracy,wall_time_s,comm_bits"

_WEIGHT_SQ = 2  # per-layer weight quantization in the compressed pipeline
_DIAG_SQ = 2  # diagonal curvature quantization


class ConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    task: str = "one-shot"
    # [data]
    data_kind: str = "image-classes"  # synthetic | image-classes | idx | csv
    clients: int = 5
    per_client: int = 100
    dim: int = 2
    alpha: float = 0.1
    n_train: int = 5000
    n_test: int = 1000
    classes: int = 10
    side: int = 28
    pixel_noise: float = 0.3
    field_noise: float = 0.15
    images_path: str = ""
    labels_path: str = ""
    test_images_path: str = ""
    test_labels_path: str = ""
    csv_path: str = ""
    test_fraction: float = 0.2
    val_fraction: float = 0.1
    # [model]
    model_kind: str = "mlp"  # two-layer | mlp
    width: int = 512
    kappa: float = 0.5
    hidden_dims: list[int] = field(default_factory=lambda: [64])
    # [local]
    loss: str = models.LOSS_SOFTMAX
    eta: float = 0.01
    momentum: float = 0.9
    epochs_or_steps: int = 30
    batch_size: int = 64  # 0 means full batch
    # [server]
    optimizer: str = "adam"
    eta_s: float | None = 0.01  # None: auto step for gd
    t_max: int = 2000
    stop_tol: float = 1e-10
    val_every: int = 100
    # [run]
    methods: list[str] = field(default_factory=lambda: [agg.METHOD_FEDAVG, agg.METHOD_DIAG])
    seeds: list[int] = field(default_factory=lambda: list(range(5)))
    widths: list[int] = field(default_factory=lambda: [32, 64, 128, 256, 512])
    steps_list: list[int] = field(default_factory=lambda: [2**k for k in range(4, 13)])
    rounds: int = 3
    out: str = ""
    timing: bool = True
    fisher_mode: str = "expected"
    draws: int = 1
    compress: bool = True
    s_q: int = 4  # Kronecker-factor quantization in the compressed pipeline
    s_q_list: list[int] = field(default_factory=lambda: [1, 2, 4, 8])


def default_config(task: str) -> ExperimentConfig:
    if task == "synthetic-width":
        return ExperimentConfig(
            task=task, data_kind="synthetic", clients=2, per_client=100, dim=2,
            model_kind="two-layer", kappa=0.5, loss=models.LOSS_SQUARED,
            eta=0.1, momentum=0.0, epochs_or_steps=2048, batch_size=0,
            optimizer="gd", eta_s=0.001, t_max=20000, val_every=0,
            methods=[agg.METHOD_FEDAVG, agg.METHOD_FULL],
            seeds=list(range(10)), compress=False, fisher_mode="expected",
        )
    if task == "synthetic-steps":
        cfg = default_config("synthetic-width")
        return replace(cfg, task=task, width=512, seeds=list(range(10)))
    if task == "one-shot":
        return ExperimentConfig(task=task)
    if task == "few-shot":
        cfg = ExperimentConfig(task=task)
        return replace(cfg, rounds=3, compress=False,
                       methods=[agg.METHOD_FEDAVG, agg.METHOD_DIAG], seeds=[0, 1, 2])
    if task == "compress-bench":
        cfg = ExperimentConfig(task=task)
        return replace(cfg, seeds=[0], methods=[agg.METHOD_DIAG, agg.METHOD_KFAC])
    raise ConfigError(f"unknown task {task!r}")


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.replace(" ", "").split(",") if part]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _parse_eta_s(text: str) -> float | None:
    if text.strip().lower() == "auto":
        return None
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"expected a float or 'auto', got {text!r}") from None


# (section, key) -> (attribute, parser). Config keys mirror attribute names.
_CONFIG_KEYS = {
    ("data", "kind"): ("data_kind", str),
    ("data", "clients"): ("clients", int),
    ("data", "per_client"): ("per_client", int),
    ("data", "dim"): ("dim", int),
    ("data", "alpha"): ("alpha", float),
    ("data", "n_train"): ("n_train", int),
    ("data", "n_test"): ("n_test", int),
    ("data", "classes"): ("classes", int),
    ("data", "side"): ("side", int),
    ("data", "pixel_noise"): ("pixel_noise", float),
    ("data", "field_noise"): ("field_noise", float),
    ("data", "images_path"): ("images_path", str),
    ("data", "labels_path"): ("labels_path", str),
    ("data", "test_images_path"): ("test_images_path", str),
    ("data", "test_labels_path"): ("test_labels_path", str),
    ("data", "csv_path"): ("csv_path", str),
    ("data", "test_fraction"): ("test_fraction", float),
    ("data", "val_fraction"): ("val_fraction", float),
    ("model", "kind"): ("model_kind", str),
    ("model", "width"): ("width", int),
    ("model", "kappa"): ("kappa", float),
    ("model", "hidden_dims"): ("hidden_dims", _parse_int_list),
    ("local", "loss"): ("loss", str),
    ("local", "eta"): ("eta", float),
    ("local", "momentum"): ("momentum", float),
    ("local", "epochs_or_steps"): ("epochs_or_steps", int),
    ("local", "batch_size"): ("batch_size", int),
    ("server", "optimizer"): ("optimizer", str),
    ("server", "eta_s"): ("eta_s", _parse_eta_s),
    ("server", "t_max"): ("t_max", int),
    ("server", "stop_tol"): ("stop_tol", float),
    ("server", "val_every"): ("val_every", int),
    ("run", "methods"): ("methods", lambda s: [m.strip() for m in s.split(",") if m.strip()]),
    ("run", "seeds"): ("seeds", _parse_int_list),
    ("run", "widths"): ("widths", _parse_int_list),
    ("run", "steps_list"): ("steps_list", _parse_int_list),
    ("run", "rounds"): ("rounds", int),
    ("run", "out"): ("out", str),
    ("run", "timing"): ("timing", _parse_bool),
    ("run", "fisher_mode"): ("fisher_mode", str),
    ("run", "draws"): ("draws", int),
    ("run", "compress"): ("compress", _parse_bool),
    ("run", "s_q"): ("s_q", int),
    ("run", "s_q_list"): ("s_q_list", _parse_int_list),
}


def load_config_file(cfg: ExperimentConfig, path: str) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    values = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            spec = _CONFIG_KEYS.get((section, key))
            if spec is None:
                raise ConfigError(f"unknown config key [{section}] {key}")
            attr, parse = spec
            try:
                values[attr] = parse(raw)
            except ConfigError:
                raise
            except ValueError as exc:
                raise ConfigError(f"bad value for [{section}] {key}: {exc}") from None
    return replace(cfg, **values)


def validate_config(cfg: ExperimentConfig) -> None:
    for method in cfg.methods:
        if method not in agg.VALID_METHODS:
            raise ConfigError(f"unknown method {method!r}, expected one of {agg.VALID_METHODS}")
    if cfg.loss not in models.VALID_LOSSES:
        raise ConfigError(f"unknown loss {cfg.loss!r}")
    if cfg.fisher_mode not in ("expected", "sampled"):
        raise ConfigError(f"unknown fisher_mode {cfg.fisher_mode!r}")
    if not cfg.seeds:
        raise ConfigError("need at least one seed")
    if not cfg.methods:
        raise ConfigError("need at least one method")
    if cfg.optimizer not in ("gd", "adam"):
        raise ConfigError(f"unknown server optimizer {cfg.optimizer!r}")
    if cfg.clients < 1:
        raise ConfigError(f"clients must be positive, got {cfg.clients}")
    if cfg.data_kind not in ("synthetic", "image-classes", "idx", "csv"):
        raise ConfigError(f"unknown data kind {cfg.data_kind!r}")
    for s_q in [cfg.s_q] + cfg.s_q_list:
        if not comp.MIN_SQ <= s_q <= comp.MAX_SQ:
            raise ConfigError(f"s_q must be in [{comp.MIN_SQ}, {comp.MAX_SQ}], got {s_q}")
    if cfg.rounds < 1:
        raise ConfigError(f"rounds must be at least 1, got {cfg.rounds}")
    if cfg.task == "synthetic-width" and not cfg.widths:
        raise ConfigError("width sweep needs at least one width")
    if cfg.task == "synthetic-steps" and not cfg.steps_list:
        raise ConfigError("step sweep needs at least one step count")
    if cfg.task == "compress-bench" and not cfg.s_q_list:
        raise ConfigError("compression sweep needs at least one s_q value")
    if cfg.task in ("synthetic-width", "synthetic-steps") and agg.METHOD_FULL in cfg.methods:
        widest = max(cfg.widths) if cfg.task == "synthetic-width" else cfg.width
        if widest * cfg.dim > 2000:  # dense curvature is (width*dim)^2 entries
            raise ConfigError(
                f"dense curvature needs width*dim <= 2000, got {widest * cfg.dim}")


@dataclass
class ResultRow:
    seed: int
    method: str
    sweep: float
    train_loss: float
    test_accuracy: float
    wall_time_s: float
    comm_bits: int


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def write_csv(rows: list[ResultRow], path: str) -> None:
    rows = sorted(rows, key=lambda r: (r.seed, r.method, r.sweep))
    lines = [CSV_HEADER]
    for r in rows:
        lines.append(",".join([
            str(r.seed), r.method, _fmt(r.sweep), _fmt(r.train_loss),
            _fmt(r.test_accuracy), _fmt(r.wall_time_s), str(int(r.comm_bits)),
        ]))
    with open(path, "w", newline="") as f:
        f.write("\n".join(lines) + "\n")


class _Clock:
    """Wall-clock timer that reads 0 when timing is disabled, keeping CSVs
    byte-identical across runs."""

    def __init__(self, enabled: bool):
        self.enabled = enabled

    def now(self) -> float:
        return time.perf_counter() if self.enabled else 0.0


def _server_config(cfg: ExperimentConfig, val_fn=None) -> agg.ServerConfig:
    return agg.ServerConfig(
        optimizer=cfg.optimizer, eta_s=cfg.eta_s, t_max=cfg.t_max,
        stop_tol=cfg.stop_tol, val_every=max(cfg.val_every, 1), val_fn=val_fn,
    )


def _local_config(cfg: ExperimentConfig, n_examples: int) -> models.TrainConfig:
    batch = cfg.batch_size if cfg.batch_size > 0 else n_examples
    return models.TrainConfig(
        eta=cfg.eta, epochs_or_steps=cfg.epochs_or_steps,
        batch_size=batch, momentum=cfg.momentum,
    )


# ---------------------------------------------------------------------------
# Synthetic regression sweeps
# ---------------------------------------------------------------------------


def _synthetic_client_models(cfg, seed, width, steps):
    """Train every client on fresh synthetic data; returns (dataset, models)."""
    data = datasets.gen_synthetic(cfg.clients, cfg.per_client, cfg.dim, seed)
    init = models.init_two_layer(width, cfg.dim, cfg.kappa, [seed, width, 7])
    local_cfg = models.TrainConfig(eta=cfg.eta, epochs_or_steps=steps,
                                   batch_size=cfg.per_client, momentum=cfg.momentum)
    trained = []
    for i in range(cfg.clients):
        cx, cy = data.client_data(i)
        result = models.sgd_train(init, cx, cy, local_cfg, loss=cfg.loss, seed=[seed, 0, i])
        if result.diverged:
            raise DivergenceError(f"client {i} diverged during local training")
        trained.append(result.model)
    return data, init, trained


def _merge_synthetic(cfg, data, init, client_models, method, clock) -> tuple[np.ndarray, float, int]:
    """Merge trained two-layer clients; returns (weights, seconds, bits)."""
    t0 = clock.now()
    updates = []
    bits = 0
    for i, model in enumerate(client_models):
        cx, _ = data.client_data(i)
        flat = models.get_flat_params(model)
        f = agg._client_fisher(method, model, cx, cfg.loss, cfg.fisher_mode, cfg.draws, [0, i])
        updates.append(agg.ClientUpdate(flat, f, cx.shape[0]))
        bits += comp.bit_cost(flat)
        if isinstance(f, fisher.FullFisher):
            bits += comp.bit_cost(f.matrix)
        elif isinstance(f, fisher.DiagFisher):
            bits += comp.bit_cost(f.diag)
    merged, result = agg.merge_updates(method, updates, _server_config(cfg))
    if result is not None and result.diverged:
        raise DivergenceError(f"server merge diverged for method {method}")
    return merged, clock.now() - t0, bits


def run_width_sweep(cfg: ExperimentConfig) -> list[ResultRow]:
    clock = _Clock(cfg.timing)
    rows = []
    for seed in cfg.seeds:
        for width in cfg.widths:
            t0 = clock.now()
            data, init, client_models = _synthetic_client_models(
                cfg, seed, width, cfg.epochs_or_steps)
            train_seconds = clock.now() - t0
            for method in cfg.methods:
                merged, merge_seconds, bits = _merge_synthetic(
                    cfg, data, init, client_models, method, clock)
                loss = models.loss_eval(models.with_flat_params(init, merged),
                                        data.x, data.y, cfg.loss)
                rows.append(ResultRow(seed, method, float(width), loss, float("nan"),
                                      train_seconds + merge_seconds, bits))
    return rows


def run_local_steps_sweep(cfg: ExperimentConfig) -> list[ResultRow]:
    """Sweep the local full-batch step count at fixed width.

    With zero momentum, full-batch descent is a deterministic trajectory, so
    each client trains once to max(steps) and is snapshotted at every sweep
    point; identical to independent runs, at a fraction of the cost.
    """
    clock = _Clock(cfg.timing)
    steps_sorted = sorted(set(cfg.steps_list))
    incremental = cfg.momentum == 0.0
    rows = []
    for seed in cfg.seeds:
        data = datasets.gen_synthetic(cfg.clients, cfg.per_client, cfg.dim, seed)
        init = models.init_two_layer(cfg.width, cfg.dim, cfg.kappa, [seed, cfg.width, 7])
        t0 = clock.now()
        snapshots: dict[int, list] = {k: [] for k in steps_sorted}
        for i in range(cfg.clients):
            cx, cy = data.client_data(i)
            if incremental:
                current = init
                done = 0
                for k in steps_sorted:
                    local_cfg = models.TrainConfig(eta=cfg.eta, epochs_or_steps=k - done,
                                                   batch_size=cfg.per_client, momentum=0.0)
                    result = models.sgd_train(current, cx, cy, local_cfg,
                                              loss=cfg.loss, seed=[seed, 0, i])
                    if result.diverged:
                        raise DivergenceError(f"client {i} diverged during local training")
                    current = result.model
                    done = k
                    snapshots[k].append(current)
            else:
                for k in steps_sorted:
                    local_cfg = models.TrainConfig(eta=cfg.eta, epochs_or_steps=k,
                                                   batch_size=cfg.per_client,
                                                   momentum=cfg.momentum)
                    result = models.sgd_train(init, cx, cy, local_cfg,
                                              loss=cfg.loss, seed=[seed, 0, i])
                    if result.diverged:
                        raise DivergenceError(f"client {i} diverged during local training")
                    snapshots[k].append(result.model)
        train_seconds = clock.now() - t0
        for k in steps_sorted:
            for method in cfg.methods:
                merged, merge_seconds, bits = _merge_synthetic(
                    cfg, data, init, snapshots[k], method, clock)
                loss = models.loss_eval(models.with_flat_params(init, merged),
                                        data.x, data.y, cfg.loss)
                rows.append(ResultRow(seed, method, float(k), loss, float("nan"),
                                      train_seconds / len(steps_sorted) + merge_seconds,
                                      bits))
    return rows


# ---------------------------------------------------------------------------
# Classification pipelines
# ---------------------------------------------------------------------------


@dataclass
class _Splits:
    train: datasets.FederatedDataset
    val_x: np.ndarray
    val_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


def _classification_data(cfg: ExperimentConfig, seed: int) -> _Splits:
    if cfg.data_kind == "image-classes":
        x_train, y_train, x_test, y_test = datasets.gen_image_classes(
            cfg.n_train, cfg.n_test, cfg.classes, cfg.side, seed,
            cfg.pixel_noise, cfg.field_noise)
    elif cfg.data_kind == "idx":
        if not cfg.images_path or not cfg.labels_path:
            raise ConfigError("idx data needs images_path and labels_path")
        x_all, y_all = datasets.load_idx(cfg.images_path, cfg.labels_path)
        if cfg.test_images_path:
            x_train, y_train = x_all, y_all
            x_test, y_test = datasets.load_idx(cfg.test_images_path, cfg.test_labels_path)
        else:
            x_train, y_train, x_test, y_test = _holdout(x_all, y_all, cfg.test_fraction, seed)
    elif cfg.data_kind == "csv":
        if not cfg.csv_path:
            raise ConfigError("csv data needs csv_path")
        x_all, y_all, names = datasets.load_csv(cfg.csv_path)
        if names is None:
            raise ConfigError("csv label column must be categorical for classification")
        x_train, y_train, x_test, y_test = _holdout(x_all, y_all, cfg.test_fraction, seed)
    else:
        raise ConfigError(f"data kind {cfg.data_kind!r} is not a classification source")

    rng = np.random.default_rng([seed, 31])
    n = x_train.shape[0]
    n_val = int(round(cfg.val_fraction * n))
    perm = rng.permutation(n)
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    x_tr, y_tr = x_train[train_idx], y_train[train_idx]
    classes = int(y_train.max()) + 1
    partition = datasets.dirichlet_partition(y_tr, cfg.clients, cfg.alpha, seed)
    train = datasets.FederatedDataset(x_tr, y_tr, partition, num_classes=classes)
    return _Splits(train, x_train[val_idx], y_train[val_idx], x_test, y_test)


def _holdout(x, y, fraction, seed):
    rng = np.random.default_rng([seed, 37])
    n = x.shape[0]
    n_test = max(1, int(round(fraction * n)))
    perm = rng.permutation(n)
    test_idx, train_idx = perm[:n_test], perm[n_test:]
    return x[train_idx], y[train_idx], x[test_idx], y[test_idx]


def _train_clients_classification(cfg, splits, init, seed, clock):
    trained = []
    seconds = []
    for i in range(splits.train.num_clients):
        cx, cy = splits.train.client_data(i)
        t0 = clock.now()
        result = models.sgd_train(init, cx, cy, _local_config(cfg, cx.shape[0]),
                                  loss=cfg.loss, seed=[seed, 0, i])
        seconds.append(clock.now() - t0)
        if result.diverged:
            raise DivergenceError(f"client {i} diverged during local training")
        trained.append(result.model)
    return trained, seconds


def _compressed_update(cfg, method, model, cx, seed_tag,
                       s_q_weights, s_q_diag, s_q_factors, quantize_payloads):
    """One client's (possibly compressed) uplink: (update, bits).

    Weights travel per-layer quantized at ``s_q_weights`` when compression is
    on; diagonal curvature likewise, Kronecker factors via planned SVD +
    ``s_q_factors``.
    """
    flat = models.get_flat_params(model)
    slices = models.layer_slices(model) if isinstance(model, models.MLP) else []
    block_sizes = [rows * cols for (_, rows, cols) in slices] or [flat.size]

    if quantize_payloads:
        q_weights = comp.quantize_blocks(flat, block_sizes, s_q_weights)
        weight_vec = comp.dequantize_blocks(q_weights)
        weight_bits = comp.bit_cost(q_weights)
    else:
        weight_vec = flat
        weight_bits = comp.bit_cost(flat)

    f = agg._client_fisher(method, model, cx, cfg.loss, cfg.fisher_mode, cfg.draws, seed_tag)
    fisher_bits = 0
    if isinstance(f, fisher.DiagFisher):
        if quantize_payloads:
            q_diag = comp.quantize_blocks(f.diag, block_sizes, s_q_diag)
            f = fisher.DiagFisher(comp.dequantize_blocks(q_diag))
            fisher_bits = comp.bit_cost(q_diag)
        else:
            fisher_bits = comp.bit_cost(f.diag)
    elif isinstance(f, fisher.KFACFisher):
        if quantize_payloads:
            layer_dims = [(layer.a.shape[0], layer.b.shape[0]) for layer in f.layers]
            plan = comp.kfac_budget_plan(layer_dims, flat.size, s_q_factors)
            packed = comp.compress_kfac(f, s_q_factors, plan.l_v)
            f = comp.decompress_kfac(packed)
            fisher_bits = comp.bit_cost(packed)
        else:
            fisher_bits = sum(comp.bit_cost(layer.a) + comp.bit_cost(layer.b)
                              for layer in f.layers)
    elif isinstance(f, fisher.FullFisher):
        fisher_bits = comp.bit_cost(f.matrix)

    return agg.ClientUpdate(weight_vec, f, cx.shape[0]), weight_bits + fisher_bits


@dataclass
class _Prepared:
    splits: _Splits
    init: models.MLP
    client_models: list
    train_seconds: float


def _prepare_one_shot(cfg: ExperimentConfig, seed: int, clock: _Clock) -> _Prepared:
    splits = _classification_data(cfg, seed)
    in_dim = splits.train.x.shape[1]
    dims = [in_dim] + list(cfg.hidden_dims) + [splits.train.num_classes]
    init = models.init_mlp(dims, [seed, 17], head=cfg.loss)
    t0 = clock.now()
    client_models, _ = _train_clients_classification(cfg, splits, init, seed, clock)
    return _Prepared(splits, init, client_models, clock.now() - t0)


def _one_shot_rows(cfg: ExperimentConfig, seed: int, sweep_value: float,
                   s_q_weights: int, s_q_diag: int, s_q_factors: int,
                   quantize_payloads: bool, methods: list[str],
                   prepared: _Prepared | None = None) -> list[ResultRow]:
    clock = _Clock(cfg.timing)
    if prepared is None:
        prepared = _prepare_one_shot(cfg, seed, clock)
    splits, init = prepared.splits, prepared.init
    client_models, train_seconds = prepared.client_models, prepared.train_seconds

    def val_fn(weights: np.ndarray) -> float:
        return models.accuracy_eval(models.with_flat_params(init, weights),
                                    splits.val_x, splits.val_y)

    rows = []
    for method in methods:
        t1 = clock.now()
        updates = []
        bits = 0
        quantized = quantize_payloads and method != agg.METHOD_FEDAVG
        for i, model in enumerate(client_models):
            cx, _ = splits.train.client_data(i)
            update, client_bits = _compressed_update(
                cfg, method, model, cx, [seed, 0, i, 99],
                s_q_weights, s_q_diag, s_q_factors, quantized)
            updates.append(update)
            bits += client_bits
        merged, result = agg.merge_updates(method, updates, _server_config(cfg, val_fn))
        if result is not None and result.diverged:
            raise DivergenceError(f"server merge diverged for method {method}")
        merged_model = models.with_flat_params(init, merged)
        rows.append(ResultRow(
            seed, method, sweep_value,
            models.loss_eval(merged_model, splits.train.x, splits.train.y, cfg.loss),
            models.accuracy_eval(merged_model, splits.test_x, splits.test_y),
            train_seconds + (clock.now() - t1), bits))
    return rows


def run_one_shot(cfg: ExperimentConfig) -> list[ResultRow]:
    rows = []
    for seed in cfg.seeds:
        rows.extend(_one_shot_rows(cfg, seed, 0.0, _WEIGHT_SQ, _DIAG_SQ, cfg.s_q,
                                   cfg.compress, cfg.methods))
    return rows


def run_few_shot(cfg: ExperimentConfig) -> list[ResultRow]:
    """Multi-round variant; the sweep column is the 1-based round index and
    communication bits accumulate over rounds (uncompressed payloads)."""
    clock = _Clock(cfg.timing)
    rows = []
    for seed in cfg.seeds:
        splits = _classification_data(cfg, seed)
        in_dim = splits.train.x.shape[1]
        dims = [in_dim] + list(cfg.hidden_dims) + [splits.train.num_classes]
        init = models.init_mlp(dims, [seed, 17], head=cfg.loss)

        def val_fn(weights: np.ndarray) -> float:
            return models.accuracy_eval(models.with_flat_params(init, weights),
                                        splits.val_x, splits.val_y)

        n_union = splits.train.x.shape[0]
        for method in cfg.methods:
            t0 = clock.now()
            result = agg.few_shot_rounds(
                splits.train, init, cfg.rounds, _local_config(cfg, n_union),
                _server_config(cfg, val_fn), method, loss=cfg.loss, seed=seed,
                eval_x=splits.test_x, eval_y=splits.test_y,
                fisher_mode=cfg.fisher_mode, draws=cfg.draws)
            if result.diverged:
                raise DivergenceError(f"few-shot diverged for method {method}")
            elapsed = clock.now() - t0
            per_round_bits = _few_shot_round_bits(method, init, splits.train)
            for r, record in enumerate(result.rounds, start=1):
                rows.append(ResultRow(seed, method, float(r), record.train_loss,
                                      record.eval_accuracy,
                                      elapsed / len(result.rounds), per_round_bits * r))
    return rows


def _few_shot_round_bits(method: str, init, train) -> int:
    d = models.param_count(init)
    if method == agg.METHOD_FEDAVG:
        per_client = 32 * d
    elif method in (agg.METHOD_DIAG, agg.METHOD_FISHERMERGE):
        per_client = 64 * d
    elif method == agg.METHOD_KFAC:
        factor_entries = 0
        for (_, rows_, cols_) in models.layer_slices(init):
            factor_entries += cols_ * cols_ + rows_ * rows_
        per_client = 32 * (d + factor_entries)
    else:  # fedfisher-full
        per_client = 32 * (d + d * d)
    return per_client * train.num_clients


def run_compress_bench(cfg: ExperimentConfig) -> list[ResultRow]:
    """Sweep the quantization factor; s_q = 1 is the uncompressed baseline.

    Local training is shared across sweep points (the codec only touches the
    uplink payloads, never the training trajectory)."""
    clock = _Clock(cfg.timing)
    rows = []
    for seed in cfg.seeds:
        prepared = _prepare_one_shot(cfg, seed, clock)
        for s_q in cfg.s_q_list:
            rows.extend(_one_shot_rows(cfg, seed, float(s_q), s_q, s_q, s_q,
                                       s_q > 1, cfg.methods, prepared))
    return rows


# ---------------------------------------------------------------------------
# Command-line front end
# ---------------------------------------------------------------------------

_RUNNERS = {
    "synthetic-width": run_width_sweep,
    "synthetic-steps": run_local_steps_sweep,
    "one-shot": run_one_shot,
    "few-shot": run_few_shot,
    "compress-bench": run_compress_bench,
}


def _add_common_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", default=None, help="INI config file")
    sub.add_argument("--out", default=None, help="output CSV path")
    sub.add_argument("--seed-list", default=None, help="comma-separated seeds")
    sub.add_argument("--methods", default=None, help="comma-separated methods")
    sub.add_argument("--no-timing", action="store_true",
                     help="write zero wall times for reproducible CSVs")
    sub.add_argument("--clients", type=int, default=None)
    sub.add_argument("--alpha", type=float, default=None)
    sub.add_argument("--eta", type=float, default=None)
    sub.add_argument("--eta-s", default=None, help="server step size or 'auto'")
    sub.add_argument("--epochs", type=int, default=None, help="local epochs or steps")
    sub.add_argument("--batch-size", type=int, default=None)
    sub.add_argument("--t-max", type=int, default=None)
    sub.add_argument("--widths", default=None, help="comma-separated widths")
    sub.add_argument("--steps-list", default=None, help="comma-separated step counts")
    sub.add_argument("--rounds", type=int, default=None)
    sub.add_argument("--s-q-list", default=None, help="comma-separated s_q values")
    sub.add_argument("--fisher-mode", default=None, choices=["expected", "sampled"])
    sub.add_argument("--data-kind", default=None)
    sub.add_argument("--n-train", type=int, default=None)
    sub.add_argument("--n-test", type=int, default=None)


def _apply_flags(cfg: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    updates = {}
    if args.out is not None:
        updates["out"] = args.out
    if args.seed_list is not None:
        updates["seeds"] = _parse_int_list(args.seed_list)
    if args.methods is not None:
        updates["methods"] = [m.strip() for m in args.methods.split(",") if m.strip()]
    if args.no_timing:
        updates["timing"] = False
    if args.clients is not None:
        updates["clients"] = args.clients
    if args.alpha is not None:
        updates["alpha"] = args.alpha
    if args.eta is not None:
        updates["eta"] = args.eta
    if args.eta_s is not None:
        updates["eta_s"] = _parse_eta_s(args.eta_s)
    if args.epochs is not None:
        updates["epochs_or_steps"] = args.epochs
    if args.batch_size is not None:
        updates["batch_size"] = args.batch_size
    if args.t_max is not None:
        updates["t_max"] = args.t_max
    if args.widths is not None:
        updates["widths"] = _parse_int_list(args.widths)
    if args.steps_list is not None:
        updates["steps_list"] = _parse_int_list(args.steps_list)
    if args.rounds is not None:
        updates["rounds"] = args.rounds
    if args.s_q_list is not None:
        updates["s_q_list"] = _parse_int_list(args.s_q_list)
    if args.fisher_mode is not None:
        updates["fisher_mode"] = args.fisher_mode
    if args.data_kind is not None:
        updates["data_kind"] = args.data_kind
    if args.n_train is not None:
        updates["n_train"] = args.n_train
    if args.n_test is not None:
        updates["n_test"] = args.n_test
    return replace(cfg, **updates)


def build_config(task: str, args: argparse.Namespace) -> ExperimentConfig:
    cfg = default_config(task)
    if args.config:
        cfg = load_config_file(cfg, args.config)
    cfg = _apply_flags(cfg, args)
    if not cfg.out:
        cfg = replace(cfg, out=f"{task}.csv")
    validate_config(cfg)
    return cfg


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="oneshot-fl",
        description="One-shot federated learning simulator",
    )
    subparsers = parser.add_subparsers(dest="task", required=True)
    for task in _RUNNERS:
        sub = subparsers.add_parser(task)
        _add_common_flags(sub)
    args = parser.parse_args(argv)

    try:
        cfg = build_config(args.task, args)
        rows = _RUNNERS[args.task](cfg)
        write_csv(rows, cfg.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"wrote {cfg.out}")
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
