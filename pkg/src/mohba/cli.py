"""Command-line pipeline: corpus generation, training, analysis, concepts.

Every command reads an optional JSON config with named sections, honors the
MOHBA_SEED environment override, and writes deterministic artifacts under
--out (timestamps only ever land in the meta.json sidecar).
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from .baselines import (
    FlatVae,
    FlatVaeConfig,
    LstmBaseline,
    LstmConfig,
    flat_vae_embed,
    flat_vae_train,
    lstm_embed,
    lstm_train,
)
from .behaviorgen import CorpusConfig, corpus_stats, generate_corpus, parse_run_id
from .concepts import (
    HeadConfig,
    concept_report,
    concept_score_matrix,
    fit_concept_head,
    generate_concepts,
)
from .envs import agent_dispersion, trajectory_return
from .evalmetrics import (
    apl,
    dispersion_classes,
    embed_dataset,
    ictd,
    kmeans,
    pca_project,
    return_classes,
    track_run,
)
from .hvae import ModelConfig, MohbaModel
from .trajdata import load_dataset, save_dataset, split_indices
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = ["ConfigError", "build_parser", "main"]


class ConfigError(ValueError):
    """Configuration problem the operator must fix; maps to exit code 2."""


_META_FIELDS = {"n_agents", "state_dim", "action_dims"}

_SECTIONS = {
    "corpus": {f.name for f in dataclasses.fields(CorpusConfig)},
    "model": {f.name for f in dataclasses.fields(ModelConfig)} - _META_FIELDS,
    "train": {f.name for f in dataclasses.fields(TrainConfig)},
    "lstm": {f.name for f in dataclasses.fields(LstmConfig)} - _META_FIELDS,
    "flat_vae": {f.name for f in dataclasses.fields(FlatVaeConfig)} - _META_FIELDS,
    "metrics": {"k", "seed", "space", "agent"},
    "concepts": {"m", "kappa", "method", "n_perms", "seed", "val_fraction",
                 "head_steps", "head_batch", "head_lr"},
}


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    for section, body in raw.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"{section}: section must be a JSON object")
        for key in body:
            if key not in _SECTIONS[section]:
                raise ConfigError(f"{section}.{key}: unknown key")
    return raw


def _build(cls, section: str, body: dict, **extra):
    try:
        return cls(**body, **extra)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}")


def _env_seed() -> int | None:
    raw = os.environ.get("MOHBA_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"MOHBA_SEED must be an integer, got {raw!r}")


def _override_seed(cfg):
    env = _env_seed()
    return cfg if env is None else dataclasses.replace(cfg, seed=env)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_sidecar(out: Path, command: str, args_ns) -> None:
    payload = {
        "command": command,
        "created_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "arguments": {k: str(v) for k, v in sorted(vars(args_ns).items())
                      if k != "func" and v is not None},
        "seed_env": os.environ.get("MOHBA_SEED"),
    }
    _write_json(out / "meta.json", payload)


def _load_model(path: str):
    if not os.path.exists(path):
        raise ConfigError(f"checkpoint not found: {path}")
    model, state = load_checkpoint(path)
    return model, state


def _gen_runs(config: CorpusConfig, runs: tuple[int, ...]):
    return generate_corpus(config, runs=runs)


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    corpus = _override_seed(_build(CorpusConfig, "corpus", cfg.get("corpus", {})))
    out = _out_dir(args)
    if args.workers > 1:
        chunks = [tuple(range(r, corpus.n_runs, args.workers))
                  for r in range(args.workers)]
        chunks = [c for c in chunks if c]
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            parts = list(pool.map(_gen_runs, [corpus] * len(chunks), chunks))
        dataset = parts[0]
        by_run: dict[int, list] = {}
        for part in parts:
            for traj in part:
                run, _ = parse_run_id(traj.run_id)
                by_run.setdefault(run, []).append(traj)
        dataset.trajectories = [t for run in sorted(by_run) for t in by_run[run]]
    else:
        dataset = generate_corpus(corpus)
    save_dataset(dataset, out / "dataset.jsonl")
    totals = np.array([traj.rewards.sum() for traj in dataset])
    counts, edges = np.histogram(totals, bins=10)
    stats = corpus_stats(dataset)
    stats["return_histogram"] = {
        "bin_edges": [float(x) for x in edges],
        "counts": [int(c) for c in counts],
    }
    _write_json(out / "stats.json", stats)
    _write_sidecar(out, "gen-data", args)
    print(f"wrote {len(dataset)} trajectories to {out / 'dataset.jsonl'}")
    return 0


def _train_common(args, out: Path, model, log, state) -> int:
    save_checkpoint(model, state, out / "checkpoint.bin")
    log.to_csv(out / "metrics.csv")
    print(f"wrote {out / 'checkpoint.bin'} and {out / 'metrics.csv'}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    dataset = load_dataset(args.data)
    model_cfg = _build(ModelConfig.from_meta, "model", cfg.get("model", {}),
                       meta=dataset.meta)
    train_cfg = _override_seed(_build(TrainConfig, "train", cfg.get("train", {})))
    out = _out_dir(args)
    if args.resume:
        model, state = _load_model(args.resume)
        if not isinstance(model, MohbaModel):
            raise ConfigError("resume checkpoint is not a hierarchical model")
        if model.config != model_cfg:
            raise ConfigError("resume checkpoint config does not match the "
                              "model section")
        model, log, state = train(model, dataset, train_cfg, resume=state,
                                  return_state=True)
    else:
        model = MohbaModel(model_cfg, init_seed=train_cfg.seed)
        model, log, state = train(model, dataset, train_cfg, return_state=True)
    _write_sidecar(out, "train", args)
    return _train_common(args, out, model, log, state)


def cmd_baseline(args) -> int:
    cfg = load_config(args.config)
    dataset = load_dataset(args.data)
    train_cfg = _override_seed(_build(TrainConfig, "train", cfg.get("train", {})))
    out = _out_dir(args)
    resume_model, state = (None, None)
    if args.resume:
        resume_model, state = _load_model(args.resume)
    if args.method == "lstm":
        if resume_model is not None and not isinstance(resume_model, LstmBaseline):
            raise ConfigError("resume checkpoint is not an lstm baseline")
        model_cfg = _build(LstmConfig.from_meta, "lstm", cfg.get("lstm", {}),
                           meta=dataset.meta)
        model, log, state = lstm_train(dataset, train_cfg, model_config=model_cfg,
                                       resume=state, return_state=True,
                                       model=resume_model)
    else:
        if resume_model is not None and not isinstance(resume_model, FlatVae):
            raise ConfigError("resume checkpoint is not a flat vae")
        model_cfg = _build(FlatVaeConfig.from_meta, "flat_vae",
                           cfg.get("flat_vae", {}), meta=dataset.meta)
        model, log, state = flat_vae_train(dataset, train_cfg,
                                           model_config=model_cfg, resume=state,
                                           return_state=True, model=resume_model)
    _write_sidecar(out, "baseline", args)
    return _train_common(args, out, model, log, state)


def _embedding_points(model, dataset, space: str, agent: int | None) -> np.ndarray:
    if isinstance(model, MohbaModel):
        table = embed_dataset(model, dataset)
        if space == "omega":
            return table.z_omega
        if agent is None or not 0 <= agent < model.config.n_agents:
            raise ConfigError("--space alpha needs a valid --agent index")
        return table.z_alpha[:, agent, :]
    if space != "omega":
        raise ConfigError("--space alpha requires a hierarchical checkpoint")
    if isinstance(model, FlatVae):
        with torch.no_grad():
            rows = [flat_vae_embed(model, traj).numpy() for traj in dataset]
        return np.asarray(rows)
    if isinstance(model, LstmBaseline):
        with torch.no_grad():
            rows = [lstm_embed(model, traj).numpy() for traj in dataset]
        return np.asarray(rows)
    raise ConfigError(f"unsupported checkpoint model {type(model).__name__}")


def _method_for(model) -> str:
    if isinstance(model, MohbaModel):
        return "mohba"
    if isinstance(model, FlatVae):
        return "flat_vae"
    if isinstance(model, LstmBaseline):
        return "lstm"
    raise ConfigError(f"unsupported checkpoint model {type(model).__name__}")


def _write_embeddings_csv(path: Path, model, dataset) -> None:
    if isinstance(model, MohbaModel):
        table = embed_dataset(model, dataset)
        d_w = table.z_omega.shape[1]
        n, d_a = table.z_alpha.shape[1], table.z_alpha.shape[2]
        header = (["traj_id"] + [f"z_omega_{j}" for j in range(d_w)]
                  + [f"z_alpha_{i}_{j}" for i in range(n) for j in range(d_a)])
        rows = [
            [str(tid)] + [format(v, ".17g") for v in table.z_omega[k]]
            + [format(v, ".17g") for v in table.z_alpha[k].ravel()]
            for k, tid in enumerate(table.traj_ids)
        ]
    else:
        points = _embedding_points(model, dataset, "omega", None)
        header = ["traj_id"] + [f"emb_{j}" for j in range(points.shape[1])]
        rows = [[str(k)] + [format(v, ".17g") for v in points[k]]
                for k in range(points.shape[0])]
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def _metrics_params(args, cfg) -> tuple[int, int]:
    section = cfg.get("metrics", {})
    k = args.k if args.k is not None else int(section.get("k", 3))
    seed = _env_seed()
    if seed is None:
        seed = int(section.get("seed", 0))
    if k < 1:
        raise ConfigError("--k must be >= 1")
    return k, seed


def cmd_analyze(args) -> int:
    cfg = load_config(args.config)
    model, _ = _load_model(args.checkpoint)
    dataset = load_dataset(args.data)
    out = _out_dir(args)
    section = cfg.get("metrics", {})
    space = args.space or section.get("space", "omega")
    agent = args.agent if args.agent is not None else section.get("agent")

    if args.action == "embed":
        _write_embeddings_csv(out / "embeddings.csv", model, dataset)
        print(f"wrote {out / 'embeddings.csv'}")
    elif args.action in ("cluster", "ictd", "track"):
        k, seed = _metrics_params(args, cfg)
        points = _embedding_points(model, dataset, space, agent)
        assignment = kmeans(points, k, seed=seed)
        if args.action == "cluster":
            _write_json(out / "clusters.json", {
                "k": k, "seed": seed, "space": space,
                "labels": [int(v) for v in assignment.labels],
                "centroids": [[float(v) for v in row]
                              for row in assignment.centroids],
                "inertia": assignment.inertia,
            })
            print(f"wrote {out / 'clusters.json'}")
        elif args.action == "ictd":
            value = ictd(points, dataset, assignment)
            _write_json(out / "ictd.json",
                        {"ictd": value, "k": k, "seed": seed, "space": space})
            print(f"ictd={value:.6f}")
        else:
            if args.run_id is None:
                raise ConfigError("track needs --run-id")
            picked = [(traj.train_step, i) for i, traj in enumerate(dataset)
                      if traj.run_id == args.run_id]
            if not picked:
                raise ConfigError(f"run id {args.run_id!r} not found in dataset")
            order = [i for _, i in sorted(picked)]
            labels, changepoints = track_run(points[order], assignment)
            _write_json(out / "track.json", {
                "run_id": args.run_id, "k": k, "space": space,
                "labels": [int(v) for v in labels],
                "changepoints": changepoints,
            })
            print(f"changepoints={changepoints}")
    elif args.action == "apl":
        value = apl(_method_for(model), model, dataset)
        _write_json(out / "apl.json", {"apl": value, "method": _method_for(model)})
        print(f"apl={value:.6f}")
    elif args.action == "project":
        points = _embedding_points(model, dataset, space, agent)
        proj = pca_project(points)
        with open(out / "projection.csv", "w") as fh:
            fh.write("traj_id,pc1,pc2\n")
            for i, (a, b) in enumerate(proj):
                fh.write(f"{i},{format(a, '.17g')},{format(b, '.17g')}\n")
        _plot_projection(proj, out / "projection.png")
        print(f"wrote {out / 'projection.csv'} and {out / 'projection.png'}")
    _write_sidecar(out, f"analyze {args.action}", args)
    return 0


def _plot_projection(proj: np.ndarray, path: Path,
                     labels: np.ndarray | None = None) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    if labels is not None:
        ax.scatter(proj[:, 0], proj[:, 1], s=12, c=labels, cmap="viridis")
    else:
        ax.scatter(proj[:, 0], proj[:, 1], s=12, color="tab:blue")
    ax.set_xlabel("pc1")
    ax.set_ylabel("pc2")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_class_trajectories(dataset, ids: list[int], path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    meta = dataset.meta
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for tid in ids:
        states = dataset[tid].states.reshape(-1, meta.n_agents, 2)
        for i in range(meta.n_agents):
            ax.plot(states[:, i, 0], states[:, i, 1], alpha=0.4, linewidth=0.8)
    ax.set_aspect("equal")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _target_values(dataset, target: str) -> np.ndarray:
    meta = dataset.meta
    if target == "dispersion":
        if meta.state_dim != 2 * meta.n_agents:
            raise ConfigError("dispersion target needs 2-d position states")
        return np.array([
            agent_dispersion(traj.states[-1].reshape(meta.n_agents, 2))
            for traj in dataset
        ])
    if not meta.has_rewards:
        raise ConfigError("target 'return' needs a dataset with rewards")
    return np.array([trajectory_return(traj)[1] for traj in dataset])


def cmd_concepts(args) -> int:
    cfg = load_config(args.config)
    section = cfg.get("concepts", {})
    model, _ = _load_model(args.checkpoint)
    if not isinstance(model, MohbaModel):
        raise ConfigError("concepts need a hierarchical checkpoint")
    dataset = load_dataset(args.data)
    out = _out_dir(args)

    m = args.m if args.m is not None else int(section.get("m", 16))
    kappa = args.kappa if args.kappa is not None else float(section.get("kappa", 0.0))
    method = args.method or section.get("method", "exact")
    n_perms = int(section.get("n_perms", 2000))
    seed = _env_seed()
    if seed is None:
        seed = int(section.get("seed", 0))
    val_fraction = float(section.get("val_fraction", 0.2))
    head_cfg = HeadConfig(
        steps=int(section.get("head_steps", 10_000)),
        batch_size=int(section.get("head_batch", 64)),
        learning_rate=float(section.get("head_lr", 1e-3)),
        seed=seed, kappa=kappa,
    )

    if args.target == "dispersion":
        labels = dispersion_classes(dataset)
    else:
        if not dataset.meta.has_rewards:
            raise ConfigError("target 'return' needs a dataset with rewards")
        labels = return_classes(dataset)
    targets = _target_values(dataset, args.target)

    table = embed_dataset(model, dataset)
    train_idx, val_idx = split_indices(len(dataset), val_fraction, seed)
    z = table.z_omega
    concepts = generate_concepts(z[train_idx], m, seed=seed)
    train_scores = concept_score_matrix(z[train_idx], concepts, kappa)
    try:
        head = fit_concept_head(train_scores, labels[train_idx], head_cfg)
    except ValueError as exc:
        raise ConfigError(str(exc))

    report = concept_report(head, concepts, z[val_idx], labels[val_idx],
                            targets[val_idx], method=method, n_perms=n_perms,
                            seed=seed)
    report.update({
        "target": args.target,
        "m_requested": m,
        "method": method,
        "seed": seed,
        "val_fraction": val_fraction,
        "val_trajectories": [int(i) for i in val_idx],
    })
    _write_json(out / "concepts.json", report)
    if dataset.meta.state_dim == 2 * dataset.meta.n_agents:
        for k, entry in report["classes"].items():
            ids = [int(val_idx[i]) for i in entry["top_trajectories"]]
            _plot_class_trajectories(dataset, ids, out / f"concepts_class_{k}.png")
    _write_sidecar(out, "concepts", args)
    print(f"validation accuracy {report['overall_accuracy']:.3f}; "
          f"wrote {out / 'concepts.json'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mohba",
        description="Multiagent trajectory corpus generation, hierarchical "
                    "VAE training, and behavior analysis.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a behavior corpus")
    p.add_argument("--config", help="JSON config with a corpus section")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--workers", type=int, default=1,
                   help="parallel run generation (deterministic merge)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the hierarchical model")
    p.add_argument("--config", help="JSON config with model/train sections")
    p.add_argument("--data", required=True, help="dataset.jsonl path")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("baseline", help="train a comparison model")
    p.add_argument("--method", required=True, choices=["lstm", "vae"])
    p.add_argument("--config", help="JSON config with train/lstm/flat_vae sections")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("analyze", help="embeddings, clustering, metrics, plots")
    p.add_argument("action",
                   choices=["embed", "cluster", "ictd", "apl", "track", "project"])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--k", type=int, help="cluster count")
    p.add_argument("--run-id", help="run to track")
    p.add_argument("--space", choices=["omega", "alpha"],
                   help="embedding space for clustering")
    p.add_argument("--agent", type=int, help="agent index for --space alpha")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("concepts", help="concept discovery report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--target", required=True, choices=["dispersion", "return"])
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--m", type=int, help="number of concepts")
    p.add_argument("--kappa", type=float, help="concept score threshold")
    p.add_argument("--method", choices=["exact", "sampled"])
    p.set_defaults(func=cmd_concepts)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        if "non-finite" in str(exc):
            print(f"numerical failure: {exc}", file=sys.stderr)
            return 3
        raise


if __name__ == "__main__":
    sys.exit(main())
