"""Stage orchestration for the command-line pipeline.

Each stage reads only the artifacts of earlier stages from the output
directory, writes its own artifacts plus a manifest (config hash, seeds,
artifact checksums), and is deterministic given the config.  Stages:

    generate -> build -> factorize -> train -> eval / analyze
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .classifier import PerceptionClassifier
from .data import (
    AnnotationSchema,
    AttributeValue,
    load_annotations,
    load_embeddings,
    load_splits,
    save_splits,
    split_posts,
)
from .factorization import InteractionFactorizer, load_model, save_model
from .interactions import InteractionMatrix, aggregate, build_matrix, build_post_index
from .lattice import CombinationUniverse, build_annotator_universe, build_universe
from .subspace import accumulate_performance, global_leverage_ordering
from .synthetic import (
    GeneratorConfig,
    PlantedEffect,
    generate,
    recoverability_report,
    write_dataset_files,
)

ARTIFACTS = {
    "splits": "splits.tsv",
    "universe": "universe.tsv",
    "posts": "posts.tsv",
    "matrix": "matrix.tsv",
    "factor_model": "factor_model.txt",
}

PRODUCED_BY = {
    "splits": "build",
    "universe": "build",
    "posts": "build",
    "matrix": "build",
    "factor_model": "factorize",
}


class MissingArtifactError(FileNotFoundError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    """Typed view of the INI config; CLI flags override individual fields."""

    # paths (resolved against the config file location)
    annotations: Path | None = None
    schema: Path | None = None
    embeddings: Path | None = None
    truth: Path | None = None
    out_dir: Path = Path("runs")
    # split
    ratios: tuple[float, float, float] = (0.7, 0.15, 0.15)
    split_seed: int = 7
    # lattice
    max_order: int | None = None
    mode: str = "combinations"
    # matrix
    tf: str = "hate-fraction"
    idf: str = "smooth-log"
    # factorization
    factorization: dict = field(default_factory=dict)
    # classifier
    classifier: dict = field(default_factory=dict)
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    features: tuple[str, ...] = ("hp", "q", "s")
    pooling: str = "weighted"
    mask: tuple[str, ...] = ()
    # analysis
    checkpoints: tuple[int, ...] = (1, 2, 5, 10, 20, 50)
    eval_split: str = "test"
    # synthetic
    synthetic: dict = field(default_factory=dict)

    def config_hash(self) -> str:
        canon = json.dumps(
            {k: str(v) for k, v in sorted(self.__dict__.items())}, sort_keys=True
        )
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _parse_attributes(text: str) -> dict[str, tuple[str, ...]]:
    """`g:2,r:3` -> {"g": ("g0","g1"), "r": ("r0","r1","r2")}."""
    out = {}
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        name, _, card = token.partition(":")
        out[name.strip()] = tuple(f"{name.strip()}{i}" for i in range(int(card)))
    return out


def _parse_planted(text: str) -> tuple[PlantedEffect, ...]:
    """`g=g1:3.0; g=g0&r=r1:-1.5` -> planted effect tuple."""
    effects = []
    for token in text.split(";"):
        token = token.strip()
        if not token:
            continue
        combo_part, _, effect_part = token.rpartition(":")
        members = []
        for pair in combo_part.split("&"):
            name, _, value = pair.partition("=")
            members.append(AttributeValue(name, value))
        effects.append(PlantedEffect(frozenset(members), float(effect_part)))
    return tuple(effects)


def load_config(path, overrides: dict | None = None) -> PipelineConfig:
    parser = configparser.ConfigParser(interpolation=None)
    read = parser.read(path, encoding="utf-8")
    if not read:
        raise FileNotFoundError(f"config file {path} not found")
    base = Path(path).resolve().parent

    def resolve(section, key):
        value = parser.get(section, key, fallback=None)
        if not value:
            return None
        p = Path(value)
        return p if p.is_absolute() else (base / p)

    kwargs: dict = {}
    for key in ("annotations", "schema", "embeddings", "truth"):
        kwargs[key] = resolve("paths", key)
    out_dir = resolve("paths", "out_dir")
    if out_dir is not None:
        kwargs["out_dir"] = out_dir

    if parser.has_section("split"):
        kwargs["ratios"] = (
            parser.getfloat("split", "train", fallback=0.7),
            parser.getfloat("split", "val", fallback=0.15),
            parser.getfloat("split", "test", fallback=0.15),
        )
        kwargs["split_seed"] = parser.getint("split", "seed", fallback=7)
    if parser.has_section("lattice"):
        raw = parser.getint("lattice", "max_order", fallback=0)
        kwargs["max_order"] = raw if raw > 0 else None
        kwargs["mode"] = parser.get("lattice", "mode", fallback="combinations")
    if parser.has_section("matrix"):
        kwargs["tf"] = parser.get("matrix", "tf", fallback="hate-fraction")
        kwargs["idf"] = parser.get("matrix", "idf", fallback="smooth-log")

    fact: dict = {}
    if parser.has_section("factorization"):
        sec = parser["factorization"]
        for key, cast in (("n_factors", int), ("learning_rate", float), ("reg", float),
                          ("n_epochs", int), ("tol", float), ("init_scale", float),
                          ("seed", int)):
            if key in sec:
                fact[key] = cast(sec[key])
        if "reg_mode" in sec:
            fact["reg_mode"] = sec["reg_mode"]
    kwargs["factorization"] = fact

    clf: dict = {}
    if parser.has_section("classifier"):
        sec = parser["classifier"]
        for key, cast in (("hidden_units", int), ("learning_rate", float),
                          ("batch_size", int), ("n_epochs", int), ("patience", int)):
            if key in sec:
                clf[key] = cast(sec[key])
        for key in ("average", "mask_mode"):
            if key in sec:
                clf[key] = sec[key]
        if "pooling" in sec:
            kwargs["pooling"] = sec["pooling"]
        if "features" in sec:
            kwargs["features"] = tuple(
                t.strip() for t in sec["features"].split(",") if t.strip())
        if "seeds" in sec:
            kwargs["seeds"] = tuple(int(t) for t in sec["seeds"].split(",") if t.strip())
    kwargs["classifier"] = clf

    if parser.has_section("analysis"):
        sec = parser["analysis"]
        if "checkpoints" in sec:
            kwargs["checkpoints"] = tuple(
                int(t) for t in sec["checkpoints"].split(",") if t.strip())
        if "eval_split" in sec:
            kwargs["eval_split"] = sec["eval_split"]

    synth: dict = {}
    if parser.has_section("synthetic"):
        sec = parser["synthetic"]
        for key, cast in (("n_users", int), ("n_posts", int), ("base_rate", float),
                          ("label_noise", float), ("post_score_scale", float),
                          ("annotations_per_user", int), ("embedding_dim", int),
                          ("embedding_noise", float), ("seed", int)):
            if key in sec:
                synth[key] = cast(sec[key])
        if "attributes" in sec:
            synth["attributes"] = _parse_attributes(sec["attributes"])
        if "planted" in sec:
            synth["planted_effects"] = _parse_planted(sec["planted"])
    kwargs["synthetic"] = synth

    config = PipelineConfig(**kwargs)
    if overrides:
        config = apply_overrides(config, overrides)
    return config


def apply_overrides(config: PipelineConfig, overrides: dict) -> PipelineConfig:
    """CLI flag overrides: seed, out_dir, mask, pooling, checkpoints, split."""
    updates: dict = {}
    if overrides.get("out_dir") is not None:
        updates["out_dir"] = Path(overrides["out_dir"])
    if overrides.get("seed") is not None:
        seed = int(overrides["seed"])
        updates["seeds"] = (seed,)
        updates["factorization"] = {**config.factorization, "seed": seed}
        updates["synthetic"] = {**config.synthetic, "seed": seed}
    if overrides.get("mask") is not None:
        mask = tuple(t.strip() for t in str(overrides["mask"]).split(",") if t.strip())
        unknown = set(mask) - {"hp", "q", "s"}
        if unknown:
            raise ValueError(f"--mask names unknown block(s) {sorted(unknown)}")
        updates["mask"] = mask
    if overrides.get("pooling") is not None:
        updates["pooling"] = overrides["pooling"]
    if overrides.get("checkpoints") is not None:
        updates["checkpoints"] = tuple(
            int(t) for t in str(overrides["checkpoints"]).split(",") if t.strip())
    if overrides.get("split") is not None:
        updates["eval_split"] = overrides["split"]
    return replace(config, **updates)


def effective_features(config: PipelineConfig) -> tuple[str, ...]:
    feats = tuple(b for b in config.features if b not in set(config.mask))
    if not feats:
        raise ValueError("the feature mask removed every block")
    return feats


def validate_config(config: PipelineConfig, need_dataset: bool = True) -> None:
    """Fail fast on unresolvable paths before any compute starts."""
    if need_dataset:
        for name in ("annotations", "schema"):
            path = getattr(config, name)
            if path is None:
                raise ValueError(f"config is missing paths.{name}")
            if not Path(path).exists():
                raise FileNotFoundError(f"paths.{name} = {path} does not exist")
        if "s" in effective_features(config):
            if config.embeddings is None:
                raise ValueError(
                    "the text-embedding feature block is enabled but "
                    "paths.embeddings is not set; set it or mask the 's' block"
                )
            if not Path(config.embeddings).exists():
                raise FileNotFoundError(
                    f"paths.embeddings = {config.embeddings} does not exist")
    if config.pooling not in ("weighted", "sum", "mean", "anno"):
        raise ValueError(f"unknown pooling {config.pooling!r}")


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path: Path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def write_manifest(config: PipelineConfig, command: str, artifacts: dict[str, Path],
                   seeds=()) -> Path:
    manifest = {
        "command": command,
        "config_hash": config.config_hash(),
        "seeds": list(seeds),
        "artifacts": {name: _sha256(path) for name, path in sorted(artifacts.items())},
    }
    path = Path(config.out_dir) / f"{command}_manifest.json"
    _write_json(path, manifest)
    return path


def _artifact(config: PipelineConfig, name: str) -> Path:
    path = Path(config.out_dir) / ARTIFACTS[name]
    if not path.exists():
        raise MissingArtifactError(
            f"missing artifact {path}; run the '{PRODUCED_BY[name]}' command first"
        )
    return path


def _universe_mode(config: PipelineConfig) -> str:
    return "annotators" if config.pooling == "anno" else config.mode


def _classifier_pooling(config: PipelineConfig) -> str:
    # annotator-level runs use one combination per user; mixing mode reduces
    # to a single learned coefficient, which "weighted" handles
    return "weighted" if config.pooling == "anno" else config.pooling


def _load_dataset(config: PipelineConfig, with_splits: bool = True,
                  with_embeddings: bool = False):
    schema = AnnotationSchema.from_file(config.schema)
    dataset = load_annotations(config.annotations, schema)
    if with_splits:
        splits = load_splits(_artifact(config, "splits"))
        dataset = dataset.with_splits(splits)
    if with_embeddings and config.embeddings is not None:
        dataset = dataset.with_embeddings(load_embeddings(config.embeddings))
    return dataset


def _training_users(dataset):
    ids = sorted({a.user_id for a in dataset.annotations_in("train")})
    return [dataset.users_by_id[uid] for uid in ids]


def _load_universe(config: PipelineConfig, dataset) -> CombinationUniverse:
    return CombinationUniverse.load(
        _artifact(config, "universe"),
        users=_training_users(dataset),
        mode=_universe_mode(config),
    )


def _head_suffix(mask) -> str:
    return "_drop-" + "-".join(sorted(mask)) if mask else ""


def run_generate(config: PipelineConfig) -> dict:
    if not config.synthetic:
        raise ValueError("config has no [synthetic] section")
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gen_config = GeneratorConfig(**config.synthetic)
    dataset, truth = generate(gen_config)
    paths = write_dataset_files(dataset, truth, out)
    write_manifest(config, "generate", paths, seeds=[gen_config.seed])
    return {
        "users": len(dataset.users),
        "posts": len(dataset.posts),
        "annotations": len(dataset.annotations),
        "paths": {k: str(v) for k, v in paths.items()},
    }


def run_build(config: PipelineConfig) -> dict:
    validate_config(config)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    schema = AnnotationSchema.from_file(config.schema)
    dataset = load_annotations(config.annotations, schema)
    dataset = split_posts(dataset, config.ratios, seed=config.split_seed)
    splits_path = out / ARTIFACTS["splits"]
    save_splits(dataset, splits_path)

    users = _training_users(dataset)
    if _universe_mode(config) == "annotators":
        universe = build_annotator_universe(users)
    else:
        universe = build_universe(users, max_order=config.max_order)
    universe_path = out / ARTIFACTS["universe"]
    universe.save(universe_path)

    post_index = build_post_index(dataset.posts)
    posts_path = out / ARTIFACTS["posts"]
    posts_path.write_text(
        "\n".join(f"{j}\t{pid}" for pid, j in sorted(post_index.items(),
                                                     key=lambda kv: kv[1])) + "\n",
        encoding="utf-8",
    )

    cells = aggregate(dataset, universe, split="train")
    matrix = build_matrix(cells, universe, dataset.posts, tf=config.tf, idf=config.idf)
    matrix_path = out / ARTIFACTS["matrix"]
    matrix.save(matrix_path)

    write_manifest(config, "build", {
        "splits": splits_path, "universe": universe_path,
        "posts": posts_path, "matrix": matrix_path,
    }, seeds=[config.split_seed])
    return {"z": matrix.z, "m": matrix.m, "nnz": matrix.nnz}


def run_factorize(config: PipelineConfig) -> dict:
    matrix = InteractionMatrix.load(_artifact(config, "matrix"))
    est = InteractionFactorizer(**config.factorization)
    est.fit(matrix)
    out = Path(config.out_dir)
    model_path = out / ARTIFACTS["factor_model"]
    save_model(est.model_, model_path)
    write_manifest(config, "factorize", {"factor_model": model_path},
                   seeds=[est.seed])
    return {
        "d": est.model_.d,
        "epochs_run": est.n_epochs_run_,
        "final_loss": est.loss_curve_[-1],
    }


def _classifier_params(config: PipelineConfig) -> dict:
    params = dict(config.classifier)
    params["features"] = effective_features(config)
    params["pooling"] = _classifier_pooling(config)
    return params


def run_train(config: PipelineConfig) -> dict:
    validate_config(config)
    need_embeddings = "s" in effective_features(config)
    dataset = _load_dataset(config, with_embeddings=need_embeddings)
    universe = _load_universe(config, dataset)
    model = load_model(_artifact(config, "factor_model"))
    out = Path(config.out_dir)
    suffix = _head_suffix(config.mask)
    artifacts = {}
    summary = {}
    for seed in config.seeds:
        clf = PerceptionClassifier(seed=seed, **_classifier_params(config))
        clf.fit(dataset, model, universe)
        path = out / f"classifier_seed{seed}{suffix}.txt"
        clf.save(path)
        artifacts[f"classifier_seed{seed}{suffix}"] = path
        summary[str(seed)] = {
            "best_epoch": clf.best_epoch_,
            "val_f1": clf.val_f1_history_[clf.best_epoch_]
            if clf.val_f1_history_ else None,
        }
    write_manifest(config, "train", artifacts, seeds=config.seeds)
    return {"heads": {k: str(v) for k, v in artifacts.items()}, "runs": summary}


def run_eval(config: PipelineConfig) -> dict:
    validate_config(config)
    dataset = _load_dataset(config, with_embeddings=config.embeddings is not None)
    universe = _load_universe(config, dataset)
    model = load_model(_artifact(config, "factor_model"))
    out = Path(config.out_dir)
    suffix = _head_suffix(config.mask)
    split = config.eval_split
    artifacts = {}
    rows = []
    for seed in config.seeds:
        masked_path = out / f"classifier_seed{seed}{suffix}.txt"
        base_path = out / f"classifier_seed{seed}.txt"
        if masked_path.exists():
            clf = PerceptionClassifier.load(masked_path, dataset, model, universe)
            extra_mask = ()
        elif base_path.exists():
            # no ablation-trained head: evaluate the full head with the
            # masked blocks zeroed at inference time
            clf = PerceptionClassifier.load(base_path, dataset, model, universe)
            extra_mask = config.mask
        else:
            raise MissingArtifactError(
                f"missing classifier checkpoint {masked_path}; "
                "run the 'train' command first"
            )
        metrics = clf.evaluate(dataset, split=split, extra_mask=extra_mask)
        payload = metrics.to_dict()
        payload["seed"] = seed
        payload["split"] = split
        payload["mask"] = sorted(config.mask)
        path = out / f"metrics_seed{seed}{suffix}.json"
        _write_json(path, payload)
        artifacts[f"metrics_seed{seed}{suffix}"] = path
        rows.append(payload)

    def agg(key):
        values = [r[key] for r in rows]
        return {
            "mean": float(np.mean(values)),
            "std": float(np.std(values, ddof=1)) if len(values) > 1 else 0.0,
        }

    summary = {
        "split": split,
        "mask": sorted(config.mask),
        "seeds": list(config.seeds),
        "accuracy": agg("accuracy"),
        "precision": agg("precision"),
        "recall": agg("recall"),
        "f1": agg("f1"),
    }
    summary_path = out / f"metrics_summary{suffix}.json"
    _write_json(summary_path, summary)
    artifacts[f"metrics_summary{suffix}"] = summary_path
    write_manifest(config, "eval", artifacts, seeds=config.seeds)
    return summary


def run_analyze(config: PipelineConfig) -> dict:
    validate_config(config)
    dataset = _load_dataset(config, with_embeddings=config.embeddings is not None)
    universe = _load_universe(config, dataset)
    model = load_model(_artifact(config, "factor_model"))
    out = Path(config.out_dir)

    ordering = global_leverage_ordering(model, universe)
    params = _classifier_params(config)
    params["seed"] = config.seeds[0]
    results = accumulate_performance(
        dataset, model, universe, params, ordering,
        checkpoints=config.checkpoints, eval_split=config.eval_split,
    )
    curve_path = out / "analysis.csv"
    lines = ["count,frobenius_error,accuracy,precision,recall,f1"]
    for count, error, metrics in results:
        lines.append(
            f"{count},{error:.17g},{metrics.accuracy:.17g},"
            f"{metrics.precision:.17g},{metrics.recall:.17g},{metrics.f1:.17g}"
        )
    curve_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    artifacts = {"analysis": curve_path}

    report = None
    if config.truth is not None and Path(config.truth).exists():
        truth = json.loads(Path(config.truth).read_text(encoding="utf-8"))
        report = recoverability_report(
            dataset, truth, model, universe, _classifier_params(config),
            seeds=config.seeds, eval_split=config.eval_split,
        )
        report_path = out / "recoverability.json"
        _write_json(report_path, report.to_dict())
        artifacts["recoverability"] = report_path

    write_manifest(config, "analyze", artifacts, seeds=config.seeds)
    result = {"checkpoints": [r[0] for r in results], "analysis": str(curve_path)}
    if report is not None:
        result["accuracy_lift"] = report.accuracy_lift
    return result
