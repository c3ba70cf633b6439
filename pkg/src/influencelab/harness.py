"""Experiment driver: config parsing with full-default echo, poisoned-dataset
construction, defense training runs, evaluation, hyperparameter sweeps, and
CSV/JSON reports.

Artifacts are content-addressed (sha256 in the filename) and never mutated;
every report row carries enough provenance (config echo, seed, hashes) to be
regenerated from scratch.
"""

import configparser
import io
import json
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import attacks, data, defenses, influence, nn


class ConfigError(ValueError):
    """Bad experiment configuration; maps to exit code 1."""


class ArtifactError(RuntimeError):
    """Missing or corrupted on-disk artifact; maps to exit code 2."""


DEFENSES = ("none", "hint", "friends", "atda")
UNTARGETED_ATTACKS = ("pgd", "dap", "durp")


@dataclass(frozen=True)
class DatasetConfig:
    source: str = "digits"  # digits | blobs | mnist
    n_train: int = 5000
    n_val: int = 500
    n_test: int = 1000
    seed: int = 0
    mnist_images: str = ""
    mnist_labels: str = ""


@dataclass(frozen=True)
class PoisonConfig:
    mode: str = "untargeted"  # untargeted | targeted
    rho: float = 1.0
    attacks: tuple[str, ...] = ("pgd", "dap", "durp")
    xi: float = 0.3
    steps: int = 40
    victim_epochs: int = 30
    victim_lr: float = 0.2
    seed: int = 11
    # targeted-mode settings; the collision budget matches the corpus scale
    # (0.3 on MNIST-like pixels), not the CIFAR-scale 0.062
    n_targets: int = 5
    targeted_xi: float = 0.3
    fc_iters: int = 1000
    poison_rows: int = 50
    pretrain_fraction: float = 0.9


@dataclass(frozen=True)
class DefenseConfig:
    name: str = "hint"
    epochs: int = 30
    pretrain_epochs: int = 2
    learning_rate: float = 0.2
    batch_size: int = 128
    trainable: str = "all"
    # influential-noise settings; the desk-scale MLP needs denser noise
    # rounds and a larger step than the full-scale protocol to show the
    # same defense margins
    gamma: float = 0.3
    beta: float = 0.062
    select_ratio: float = 0.5
    schedule: tuple[int, ...] = tuple(range(3, 28, 3))
    lissa_depth: int = 500
    lissa_repetitions: int = 4
    lissa_damping: float = 0.01
    lissa_batch: int = 8
    # friendly-noise settings
    friends_lambda: float = 1.0
    friends_steps: int = 10
    # adversarial-training settings
    atda_beta: float = 0.25
    atda_tau: float = 0.5
    atda_steps: int = 7


@dataclass(frozen=True)
class TrialConfig:
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model_hidden: tuple[int, ...] = (64,)
    model_activation: str = "relu"
    model_top_layers: int = 1
    poison: PoisonConfig = field(default_factory=PoisonConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    trial: TrialConfig = field(default_factory=TrialConfig)

    def model_spec(self, input_dim: int, n_classes: int) -> nn.ModelSpec:
        return nn.ModelSpec((input_dim, *self.model_hidden, n_classes),
                            activation=self.model_activation,
                            top_layer_count=self.model_top_layers)


def _parse_tuple(raw: str, cast) -> tuple:
    raw = raw.strip()
    if not raw:
        return ()
    return tuple(cast(tok.strip()) for tok in raw.split(","))


def load_config(path: str | None, overrides: dict | None = None) -> ExperimentConfig:
    """Read the flat key/value sections, falling back to defaults everywhere;
    overrides (CLI flags) win over the file."""
    parser = configparser.ConfigParser()
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        parser.read(path)

    def get(section, key, default, cast=str):
        try:
            if parser.has_option(section, key):
                return cast(parser.get(section, key))
        except ValueError as err:
            raise ConfigError(f"bad value for [{section}] {key}: {err}") from err
        return default

    ds = DatasetConfig(
        source=get("dataset", "source", "digits"),
        n_train=get("dataset", "n_train", 5000, int),
        n_val=get("dataset", "n_val", 500, int),
        n_test=get("dataset", "n_test", 1000, int),
        seed=get("dataset", "seed", 0, int),
        mnist_images=get("dataset", "mnist_images", ""),
        mnist_labels=get("dataset", "mnist_labels", ""),
    )
    po = PoisonConfig(
        mode=get("poison", "mode", "untargeted"),
        rho=get("poison", "rho", 1.0, float),
        attacks=get("poison", "attacks", ("pgd", "dap", "durp"), lambda s: _parse_tuple(s, str)),
        xi=get("poison", "xi", 0.3, float),
        steps=get("poison", "steps", 40, int),
        victim_epochs=get("poison", "victim_epochs", 30, int),
        victim_lr=get("poison", "victim_lr", 0.2, float),
        seed=get("poison", "seed", 11, int),
        n_targets=get("poison", "n_targets", 5, int),
        targeted_xi=get("poison", "targeted_xi", 0.3, float),
        fc_iters=get("poison", "fc_iters", 1000, int),
        poison_rows=get("poison", "poison_rows", 50, int),
        pretrain_fraction=get("poison", "pretrain_fraction", 0.9, float),
    )
    de = DefenseConfig(
        name=get("defense", "name", "hint"),
        epochs=get("defense", "epochs", 30, int),
        pretrain_epochs=get("defense", "pretrain_epochs", 2, int),
        learning_rate=get("defense", "learning_rate", 0.2, float),
        batch_size=get("defense", "batch_size", 128, int),
        trainable=get("defense", "trainable", "all"),
        gamma=get("defense", "gamma", 0.3, float),
        beta=get("defense", "beta", 0.062, float),
        select_ratio=get("defense", "select_ratio", 0.5, float),
        schedule=get("defense", "schedule", tuple(range(3, 28, 3)),
                     lambda s: _parse_tuple(s, int)),
        lissa_depth=get("defense", "lissa_depth", 500, int),
        lissa_repetitions=get("defense", "lissa_repetitions", 4, int),
        lissa_damping=get("defense", "lissa_damping", 0.01, float),
        lissa_batch=get("defense", "lissa_batch", 8, int),
        friends_lambda=get("defense", "friends_lambda", 1.0, float),
        friends_steps=get("defense", "friends_steps", 10, int),
        atda_beta=get("defense", "atda_beta", 0.25, float),
        atda_tau=get("defense", "atda_tau", 0.5, float),
        atda_steps=get("defense", "atda_steps", 7, int),
    )
    tr = TrialConfig(seeds=get("trial", "seeds", (0, 1, 2, 3, 4), lambda s: _parse_tuple(s, int)))
    cfg = ExperimentConfig(
        dataset=ds,
        model_hidden=get("model", "hidden", (64,), lambda s: _parse_tuple(s, int)),
        model_activation=get("model", "activation", "relu"),
        model_top_layers=get("model", "top_layers", 1, int),
        poison=po,
        defense=de,
        trial=tr,
    )
    cfg = apply_overrides(cfg, overrides or {})
    validate_config(cfg)
    return cfg


def apply_overrides(cfg: ExperimentConfig, ov: dict) -> ExperimentConfig:
    if ov.get("seeds"):
        cfg = replace(cfg, trial=TrialConfig(seeds=tuple(ov["seeds"])))
    if ov.get("rho") is not None:
        cfg = replace(cfg, poison=replace(cfg.poison, rho=ov["rho"]))
    if ov.get("attacks"):
        cfg = replace(cfg, poison=replace(cfg.poison, attacks=tuple(ov["attacks"])))
    de = {}
    for key in ("defense", "r", "beta", "gamma"):
        if ov.get(key) is not None:
            de[{"defense": "name", "r": "select_ratio"}.get(key, key)] = ov[key]
    if de:
        cfg = replace(cfg, defense=replace(cfg.defense, **de))
    return cfg


def validate_config(cfg: ExperimentConfig):
    if cfg.dataset.source not in ("digits", "blobs", "mnist"):
        raise ConfigError(f"unknown dataset source {cfg.dataset.source!r}")
    if cfg.dataset.source == "mnist" and not (cfg.dataset.mnist_images and cfg.dataset.mnist_labels):
        raise ConfigError("mnist source needs mnist_images and mnist_labels paths")
    if cfg.poison.mode not in ("untargeted", "targeted"):
        raise ConfigError(f"unknown poison mode {cfg.poison.mode!r}")
    if not 0.0 <= cfg.poison.rho <= 1.0:
        raise ConfigError(f"poison ratio must lie in [0, 1], got {cfg.poison.rho}")
    unknown = set(cfg.poison.attacks) - set(UNTARGETED_ATTACKS)
    if unknown:
        raise ConfigError(f"unknown attacks {sorted(unknown)}; registered: {UNTARGETED_ATTACKS}")
    if cfg.defense.name not in DEFENSES:
        raise ConfigError(f"unknown defense {cfg.defense.name!r}; registered: {DEFENSES}")
    if not cfg.trial.seeds:
        raise ConfigError("trial seeds must be non-empty")
    try:
        build_defense_configs(cfg.defense)
    except ValueError as err:
        raise ConfigError(str(err)) from err


def echo_config(cfg: ExperimentConfig) -> str:
    """Render the fully-defaulted config back to INI text (the echo)."""
    parser = configparser.ConfigParser()
    parser["dataset"] = {k: _fmt(v) for k, v in asdict(cfg.dataset).items()}
    parser["model"] = {
        "hidden": _fmt(cfg.model_hidden),
        "activation": cfg.model_activation,
        "top_layers": _fmt(cfg.model_top_layers),
    }
    parser["poison"] = {k: _fmt(v) for k, v in asdict(cfg.poison).items()}
    parser["defense"] = {k: _fmt(v) for k, v in asdict(cfg.defense).items()}
    parser["trial"] = {"seeds": _fmt(cfg.trial.seeds)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def build_dataset(cfg: DatasetConfig) -> tuple[data.LabeledSet, data.LabeledSet, data.LabeledSet]:
    rng = np.random.default_rng(cfg.seed)
    total = cfg.n_train + cfg.n_val + cfg.n_test
    if cfg.source == "digits":
        corpus = data.rendered_digits(total, rng)
    elif cfg.source == "blobs":
        corpus = data.synthetic_blobs(total, rng)
    else:
        corpus = data.load_idx(cfg.mnist_images, cfg.mnist_labels)
    return data.split(corpus, cfg.n_train, cfg.n_val, cfg.n_test, rng)


def build_defense_configs(de: DefenseConfig):
    """Translate the flat defense section into the trainer config objects."""
    lissa = influence.LissaConfig(depth=de.lissa_depth, repetitions=de.lissa_repetitions,
                                  damping=de.lissa_damping, batch_size=de.lissa_batch)
    hint = defenses.HintConfig(
        epochs=de.epochs, pretrain_epochs=de.pretrain_epochs, gamma=de.gamma, beta=de.beta,
        select_ratio=de.select_ratio, schedule=de.schedule, learning_rate=de.learning_rate,
        batch_size=de.batch_size, lissa=lissa, trainable=de.trainable,
    )
    friends = defenses.FriendsConfig(
        epochs=de.epochs, pretrain_epochs=de.pretrain_epochs, learning_rate=de.learning_rate,
        batch_size=de.batch_size, beta=de.beta, lam=de.friends_lambda,
        noise_steps=de.friends_steps, trainable=de.trainable,
    )
    atda = defenses.AtdaConfig(
        epochs=de.epochs, learning_rate=de.learning_rate, batch_size=de.batch_size,
        beta=de.atda_beta, tau=de.atda_tau, inner_steps=de.atda_steps, trainable=de.trainable,
    )
    return {"hint": hint, "friends": friends, "atda": atda, "none": hint}


def run_defense(de: DefenseConfig, train_set, val_set, params_init, rng) -> nn.ParamVector:
    cfgs = build_defense_configs(de)
    if de.name == "none":
        return defenses.sgd_train(cfgs["hint"], train_set, params_init, rng)
    if de.name == "hint":
        return defenses.hint_train(cfgs["hint"], train_set, val_set, params_init, rng)
    if de.name == "friends":
        return defenses.friends_train(cfgs["friends"], train_set, val_set, params_init, rng)
    if de.name == "atda":
        return defenses.atda_train(cfgs["atda"], train_set, params_init, rng)
    raise ConfigError(f"unknown defense {de.name!r}")


def _content_addressed(out_dir: str, stem: str, suffix: str, write_fn) -> str:
    """Write via write_fn to a temp path, then rename to include the hash."""
    tmp = os.path.join(out_dir, f".tmp-{stem}{suffix}")
    write_fn(tmp)
    digest = data.file_digest(tmp)[:12]
    final = os.path.join(out_dir, f"{stem}-{digest}{suffix}")
    os.replace(tmp, final)
    return final


def _train_victim(spec, train_set, epochs, lr, rng):
    cfg = defenses.HintConfig(epochs=epochs, schedule=(), learning_rate=lr,
                              pretrain_epochs=0)
    return defenses.sgd_train(cfg, train_set, nn.init_params(spec, rng), rng)


def cmd_poison(cfg: ExperimentConfig, out_dir: str) -> str:
    """Build the poisoned dataset artifact (or per-trial artifacts in targeted
    mode); returns the artifact path (directory for targeted mode)."""
    os.makedirs(out_dir, exist_ok=True)
    trn, val, tst = build_dataset(cfg.dataset)
    if cfg.poison.mode == "targeted":
        return _poison_targeted(cfg, trn, val, tst, out_dir)
    return _poison_untargeted(cfg, trn, val, tst, out_dir)


def _poison_untargeted(cfg, trn, val, tst, out_dir) -> str:
    po = cfg.poison
    spec = cfg.model_spec(trn.dim, int(trn.y.max()) + 1)
    plan = data.PoisonPlan.draw(po.rho, po.attacks, len(trn), np.random.default_rng([po.seed, 0]))
    budget = attacks.AttackBudget(xi=po.xi, steps=po.steps)

    outputs, records = {}, []
    for k, name in enumerate(plan.attacks):
        idx = plan.assignments[name]
        if len(idx) == 0:
            outputs[name] = np.zeros((0, trn.dim))
            continue
        victim = _train_victim(spec, trn, po.victim_epochs, po.victim_lr,
                               np.random.default_rng([po.seed, 1 + k]))
        if name == "pgd":
            rows = attacks.pgd_untargeted_rows(victim, trn.X[idx], trn.y[idx], budget)
        elif name == "dap":
            rows = attacks.dap_rows(victim, trn.X[idx], trn.y[idx], budget)
        elif name == "durp":
            rows = attacks.durp((trn.X[idx], trn.y[idx]), po.xi,
                                np.random.default_rng([po.seed, 100 + k]),
                                num_classes=spec.num_classes)
        else:
            raise ConfigError(f"unknown attack {name!r}")
        outputs[name] = rows
        records.extend(
            {"origin_index": int(trn.origin_index[i]), "attack": name, "xi": po.xi, "seed": po.seed}
            for i in idx
        )
    poisoned = data.assemble_poisoned(trn, plan, outputs)

    def write(tmp):
        np.savez(
            tmp if tmp.endswith(".npz") else tmp, X=poisoned.X, y=poisoned.y,
            provenance=poisoned.provenance, origin_index=poisoned.origin_index,
            X_val=val.X, y_val=val.y, X_tst=tst.X, y_tst=tst.y,
            meta_mode=np.asarray("untargeted"), meta_rho=np.asarray(str(po.rho)),
        )

    path = _content_addressed(out_dir, f"dataset-rho{po.rho:g}", ".npz", write)
    attacks.write_manifest(path.replace(".npz", ".manifest.csv"), records)
    with open(path + ".sha256", "w") as fh:
        fh.write(data.file_digest(path) + "\n")
    return path


def _poison_targeted(cfg, trn, val, tst, out_dir) -> str:
    po = cfg.poison
    spec = cfg.model_spec(trn.dim, int(trn.y.max()) + 1)
    n_classes = spec.num_classes
    tdir = os.path.join(out_dir, "targeted")
    os.makedirs(tdir, exist_ok=True)

    # clean pre-training pool vs transfer pool, stratified by random draw
    rng_split = np.random.default_rng([po.seed, 7])
    n_pre = int(round(po.pretrain_fraction * len(trn)))
    perm = rng_split.permutation(len(trn))
    pre_idx, transfer_idx = perm[:n_pre], perm[n_pre:]

    for t in range(po.n_targets):
        rng = np.random.default_rng([po.seed, 200 + t])
        victim = _train_victim(spec, trn.subset(pre_idx), po.victim_epochs, po.victim_lr,
                               np.random.default_rng([po.seed, 300 + t]))
        y_adv = int(rng.integers(0, n_classes))
        candidates = [c for c in range(n_classes) if c != y_adv]
        y_src = int(rng.choice(candidates))
        # a target the clean victim classifies correctly
        pool = np.flatnonzero(tst.y == y_src)
        pred = nn.forward(victim, tst.X[pool]).argmax(axis=1)
        good = pool[pred == y_src]
        if good.size == 0:
            good = pool
        target_row = int(good[rng.integers(0, good.size)])
        target_x = tst.X[target_row]

        base_pool = transfer_idx[trn.y[transfer_idx] == y_adv]
        n_poison = min(po.poison_rows, base_pool.size)
        bases = rng.choice(base_pool, size=n_poison, replace=False)

        transfer = trn.subset(transfer_idx)
        Xp = np.array(transfer.X)
        prov = np.array(transfer.provenance)
        pos_of = {int(r): i for i, r in enumerate(transfer_idx)}
        for b in bases:
            pos = pos_of[int(b)]
            out = attacks.feature_collision(
                victim, nn.Example(trn.X[b], int(trn.y[b])), target_x,
                iters=po.fc_iters, xi=po.targeted_xi,
            )
            Xp[pos] = out.x
            prov[pos] = "fc"
        poisoned_transfer = data.LabeledSet(X=Xp, y=transfer.y, provenance=prov,
                                            origin_index=transfer.origin_index)

        def write(tmp):
            np.savez(
                tmp, X=poisoned_transfer.X, y=poisoned_transfer.y,
                provenance=poisoned_transfer.provenance,
                origin_index=poisoned_transfer.origin_index,
                X_val=val.X, y_val=val.y, X_tst=tst.X, y_tst=tst.y,
                victim=victim.values, target_x=target_x,
                target_y=np.asarray(y_src), y_adv=np.asarray(y_adv),
                meta_mode=np.asarray("targeted"), meta_trial=np.asarray(str(t)),
            )

        path = _content_addressed(tdir, f"trial{t}", ".npz", write)
        attacks.write_manifest(
            path.replace(".npz", ".manifest.csv"),
            [{"origin_index": int(trn.origin_index[b]), "attack": "fc",
              "xi": po.targeted_xi, "seed": po.seed} for b in bases],
        )
        with open(path + ".sha256", "w") as fh:
            fh.write(data.file_digest(path) + "\n")
    return tdir


def _verify_artifact(path: str):
    if not os.path.exists(path):
        raise ArtifactError(f"missing artifact: {path}")
    sidecar = path + ".sha256"
    if os.path.exists(sidecar):
        with open(sidecar) as fh:
            expected = fh.read().strip()
        if data.file_digest(path) != expected:
            raise ArtifactError(f"artifact hash mismatch for {path}")
        return
    # content-addressed names carry their own 12-hex digest suffix
    stem = os.path.splitext(os.path.basename(path))[0]
    suffix = stem.rsplit("-", 1)[-1]
    if len(suffix) == 12 and all(c in "0123456789abcdef" for c in suffix):
        if data.file_digest(path)[:12] != suffix:
            raise ArtifactError(f"artifact hash mismatch for {path}")


def _load_untargeted(path: str):
    _verify_artifact(path)
    with np.load(path) as z:
        train = data.LabeledSet(X=z["X"], y=z["y"], provenance=z["provenance"],
                                origin_index=z["origin_index"])
        val = data.LabeledSet.clean(z["X_val"], z["y_val"])
        tst = data.LabeledSet.clean(z["X_tst"], z["y_tst"])
    return train, val, tst


def _report_paths(out_dir: str):
    return (os.path.join(out_dir, "report.csv"),
            os.path.join(out_dir, "report.json"),
            os.path.join(out_dir, "summary.csv"))


def _append_records(out_dir: str, new_records: list[dict], echo: str):
    """Single-writer merge: rewrite report files from the union of records."""
    csv_path, json_path, summary_path = _report_paths(out_dir)
    records = []
    if os.path.exists(json_path):
        with open(json_path) as fh:
            records = json.load(fh)["records"]
    records.extend(new_records)
    records.sort(key=lambda r: (str(r["defense"]), str(r["rho_or_axis"]), int(r["seed"])))

    with open(csv_path, "w") as fh:
        fh.write("defense,rho_or_axis,seed,test_acc,asr,seconds\n")
        for r in records:
            asr = "" if r["asr"] is None else f"{r['asr']:.12g}"
            fh.write(f"{r['defense']},{r['rho_or_axis']},{r['seed']},"
                     f"{r['test_acc']:.12g},{asr},{r['seconds']:.3f}\n")
    with open(json_path, "w") as fh:
        json.dump({"config_echo": echo, "records": records}, fh, indent=1, sort_keys=True)
    write_summary(records, summary_path)
    return csv_path


def write_summary(records: list[dict], summary_path: str):
    """Aggregate rows recomputed from the per-seed records (never stored)."""
    groups: dict[tuple, list[float]] = {}
    for r in records:
        groups.setdefault((str(r["defense"]), str(r["rho_or_axis"])), []).append(float(r["test_acc"]))
    with open(summary_path, "w") as fh:
        fh.write("defense,rho_or_axis,n_seeds,mean_acc,std_acc,median_acc\n")
        for (name, axis), accs in sorted(groups.items()):
            arr = np.asarray(accs)
            std = arr.std(ddof=1) if arr.size > 1 else 0.0
            fh.write(f"{name},{axis},{arr.size},{arr.mean():.12g},{std:.12g},"
                     f"{float(np.median(arr)):.12g}\n")


def cmd_train(cfg: ExperimentConfig, dataset_path: str, out_dir: str,
              axis_label: str | None = None) -> list[dict]:
    """Run the configured defense once per trial seed on the poisoned
    artifact; persists trained parameters and appends report rows."""
    os.makedirs(out_dir, exist_ok=True)
    echo = echo_config(cfg)
    with open(os.path.join(out_dir, "config-echo.ini"), "w") as fh:
        fh.write(echo)

    if os.path.isdir(dataset_path):
        records = _train_targeted(cfg, dataset_path, out_dir)
    else:
        records = _train_untargeted(cfg, dataset_path, out_dir, axis_label)
    _append_records(out_dir, records, echo)
    return records


def _train_untargeted(cfg, dataset_path, out_dir, axis_label):
    train, val, tst = _load_untargeted(dataset_path)
    spec = cfg.model_spec(train.dim, int(max(train.y.max(), tst.y.max())) + 1)
    dataset_hash = data.file_digest(dataset_path)[:12]
    label = axis_label if axis_label is not None else f"{cfg.poison.rho:g}"

    records = []
    for seed in cfg.trial.seeds:
        t0 = time.time()
        params = run_defense(cfg.defense, train, val,
                             nn.init_params(spec, np.random.default_rng([seed, 0])),
                             np.random.default_rng([seed, 1]))
        seconds = time.time() - t0
        acc = defenses.evaluate_accuracy(params, tst)
        ppath = _content_addressed(out_dir, f"params-{cfg.defense.name}-s{seed}", ".bin",
                                   lambda tmp: nn.save_params(tmp, params))
        records.append({
            "defense": cfg.defense.name, "rho_or_axis": label, "seed": int(seed),
            "test_acc": float(acc), "asr": None, "seconds": seconds,
            "dataset_hash": dataset_hash, "params_hash": os.path.basename(ppath).split("-")[-1][:-4],
        })
    return records


def _train_targeted(cfg, artifact_dir, out_dir):
    trials = sorted(f for f in os.listdir(artifact_dir)
                    if f.startswith("trial") and f.endswith(".npz"))
    if not trials:
        raise ArtifactError(f"no targeted trial artifacts under {artifact_dir}")
    records = []
    for filename in trials:
        path = os.path.join(artifact_dir, filename)
        _verify_artifact(path)
        with np.load(path) as z:
            transfer = data.LabeledSet(X=z["X"], y=z["y"], provenance=z["provenance"],
                                       origin_index=z["origin_index"])
            val = data.LabeledSet.clean(z["X_val"], z["y_val"])
            tst = data.LabeledSet.clean(z["X_tst"], z["y_tst"])
            victim_values = z["victim"]
            target_x, target_y, y_adv = z["target_x"], int(z["target_y"]), int(z["y_adv"])
            trial = int(str(z["meta_trial"]))

        spec = cfg.model_spec(transfer.dim, int(tst.y.max()) + 1)
        victim = nn.make_params(spec, victim_values)
        tspec = attacks.TargetSpec(nn.Example(target_x, target_y), y_adv,
                                   np.flatnonzero(transfer.provenance == "fc"))

        # transfer learning: keep the victim's features, retrain the head only
        rng_head = np.random.default_rng([cfg.poison.seed, 400 + trial])
        head_mask = nn.top_layer_mask(spec)
        fresh = nn.init_params(spec, rng_head)
        start = nn.make_params(spec, np.where(head_mask, fresh.values, victim.values))
        de = replace(cfg.defense, trainable="top")

        t0 = time.time()
        params = run_defense(de, transfer, val, start, np.random.default_rng([trial, 1]))
        seconds = time.time() - t0
        acc = defenses.evaluate_accuracy(params, tst)
        asr = defenses.evaluate_asr(params, [tspec])
        records.append({
            "defense": cfg.defense.name, "rho_or_axis": f"fc-trial{trial}", "seed": trial,
            "test_acc": float(acc), "asr": float(asr), "seconds": seconds,
            "dataset_hash": data.file_digest(path)[:12], "params_hash": "",
        })
    return records


def cmd_eval(params_path: str, dataset_path: str, out_dir: str,
             targets_path: str | None = None) -> dict:
    """Recompute metrics for persisted parameters against a dataset artifact."""
    _verify_artifact(params_path)
    os.makedirs(out_dir, exist_ok=True)
    params = nn.load_params(params_path)
    if os.path.isdir(dataset_path):
        raise ArtifactError("eval expects a single dataset artifact, not a directory")
    _verify_artifact(dataset_path)
    with np.load(dataset_path) as z:
        tst = data.LabeledSet.clean(z["X_tst"], z["y_tst"])
        asr = None
        if targets_path is not None or "target_x" in z.files:
            target_x, target_y, y_adv = z["target_x"], int(z["target_y"]), int(z["y_adv"])
            tspec = attacks.TargetSpec(nn.Example(target_x, target_y), y_adv, np.zeros(0, dtype=np.int64))
            asr = defenses.evaluate_asr(params, [tspec])
    record = {
        "defense": "eval", "rho_or_axis": os.path.basename(dataset_path),
        "seed": -1, "test_acc": defenses.evaluate_accuracy(params, tst),
        "asr": asr, "seconds": 0.0,
        "dataset_hash": data.file_digest(dataset_path)[:12],
        "params_hash": data.file_digest(params_path)[:12],
    }
    _append_records(out_dir, [record], "")
    return record


SWEEP_AXES = ("r", "beta", "rho")


def cmd_sweep(cfg: ExperimentConfig, axis: str, values: tuple[float, ...], out_dir: str) -> str:
    """One full train/eval per axis value per seed; emits sweep.csv with the
    recomputed mean/std per value."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    os.makedirs(out_dir, exist_ok=True)

    all_records = []
    dataset_path = None
    if axis != "rho":
        dataset_path = cmd_poison(cfg, out_dir)
    for value in values:
        if axis == "rho":
            vcfg = replace(cfg, poison=replace(cfg.poison, rho=float(value)))
            vpath = cmd_poison(vcfg, out_dir)
        else:
            field_name = {"r": "select_ratio", "beta": "beta"}[axis]
            vcfg = replace(cfg, defense=replace(cfg.defense, **{field_name: float(value)}))
            vpath = dataset_path
        recs = cmd_train(vcfg, vpath, out_dir, axis_label=f"{axis}={value:g}")
        all_records.extend(recs)

    sweep_path = os.path.join(out_dir, "sweep.csv")
    with open(sweep_path, "w") as fh:
        fh.write(f"{axis},mean_acc,std_acc,median_acc,n_seeds\n")
        for value in values:
            accs = np.asarray([r["test_acc"] for r in all_records
                               if r["rho_or_axis"] == f"{axis}={value:g}"])
            std = accs.std(ddof=1) if accs.size > 1 else 0.0
            fh.write(f"{value:g},{accs.mean():.12g},{std:.12g},{float(np.median(accs)):.12g},{accs.size}\n")
    return sweep_path


def cmd_report(out_dir: str) -> str:
    """Rebuild summary.csv from the stored per-seed records."""
    _, json_path, summary_path = _report_paths(out_dir)
    if not os.path.exists(json_path):
        raise ArtifactError(f"no report records under {out_dir}")
    with open(json_path) as fh:
        records = json.load(fh)["records"]
    write_summary(records, summary_path)
    return summary_path
