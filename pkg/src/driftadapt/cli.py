"""Command-line surface: build streams, run scenarios and ablations, dump
plot-ready feature/metric CSVs, inspect checkpoints.

Configuration is flat ``key=value`` text with ``#`` comments. Stream fields
live under ``stream.``, run fields under ``run.``, ablation fields under
``ablate.``; ``--set key=value`` overrides, ``--seed N`` overrides both the
stream and run seeds. Unknown keys are rejected.

Exit codes: 0 ok, 2 config error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from .autodiff import NumericError
from .orchestrator import (ABLATION_METHODS, RunConfig, config_hash, load_checkpoint,
                           run_scenario, save_checkpoint, write_bounds_csv)
from .streams import (DomainTransform, StreamSpec, build_stream, export_csv,
                      ingest_csv)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# flat key=value configuration
# ---------------------------------------------------------------------------

def parse_transform(text):
    """One transform: "identity" or comma-separated rot/tx/ty/scale/noise."""
    text = text.strip()
    if text in ("identity", ""):
        return DomainTransform()
    kwargs = {"rotation": 0.0, "translation": [0.0, 0.0], "scale": 1.0, "noise_std": 0.0}
    for item in text.split(","):
        if "=" not in item:
            raise ConfigError(f"bad transform field {item!r} (expected k=v)")
        k, v = (s.strip() for s in item.split("=", 1))
        try:
            v = float(v)
        except ValueError:
            raise ConfigError(f"bad transform value {item!r}") from None
        if k == "rot":
            kwargs["rotation"] = v
        elif k == "tx":
            kwargs["translation"][0] = v
        elif k == "ty":
            kwargs["translation"][1] = v
        elif k == "scale":
            kwargs["scale"] = v
        elif k == "noise":
            kwargs["noise_std"] = v
        else:
            raise ConfigError(f"unknown transform field {k!r} (rot/tx/ty/scale/noise)")
    kwargs["translation"] = tuple(kwargs["translation"])
    return DomainTransform(**kwargs)


def format_transform(t):
    if t.is_identity():
        return "identity"
    return (f"rot={t.rotation!r},tx={t.translation[0]!r},ty={t.translation[1]!r},"
            f"scale={t.scale!r},noise={t.noise_std!r}")


def _parse_bool(value, key):
    lowered = value.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {value!r}")


def _parse_int_list(value):
    value = value.strip()
    if not value:
        return []
    return [int(v) for v in value.split(",")]


@dataclasses.dataclass
class CliConfig:
    stream: StreamSpec
    run: RunConfig
    ablate_seeds: list

    def pairs(self):
        """Every effective setting as flat (key, value-string) pairs."""
        out = []
        for f in dataclasses.fields(StreamSpec):
            v = getattr(self.stream, f.name)
            if f.name == "transforms":
                v = " | ".join(format_transform(t) for t in v)
            elif f.name == "classes_per_task":
                v = ",".join(str(c) for c in v)
            out.append((f"stream.{f.name}", str(v)))
        for f in dataclasses.fields(RunConfig):
            v = getattr(self.run, f.name)
            if f.name == "augment_sources":
                v = ",".join(str(s) for s in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif v is None:
                v = "none"
            out.append((f"run.{f.name}", str(v)))
        out.append(("ablate.seeds", ",".join(str(s) for s in self.ablate_seeds)))
        return out


def default_config():
    return CliConfig(stream=StreamSpec(), run=RunConfig(), ablate_seeds=[0])


def apply_setting(cfg, key, value):
    key = key.strip()
    value = value.strip()
    section, _, name = key.partition(".")
    try:
        if section == "stream":
            _apply_stream(cfg.stream, name, value)
        elif section == "run":
            _apply_run(cfg.run, name, value)
        elif section == "ablate":
            if name != "seeds":
                raise ConfigError(f"unknown key {key!r}")
            cfg.ablate_seeds = _parse_int_list(value)
        else:
            raise ConfigError(f"unknown key {key!r}")
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: {exc}") from None


def _apply_stream(spec, name, value):
    if name == "transforms":
        spec.transforms = [parse_transform(t) for t in value.split("|")]
    elif name == "classes_per_task":
        spec.classes_per_task = _parse_int_list(value)
    elif name in ("scenario", "base", "ordering"):
        setattr(spec, name, value)
    elif name in ("num_classes", "samples_per_class", "seed"):
        setattr(spec, name, int(value))
    elif name == "base_noise":
        spec.base_noise = float(value)
    else:
        raise ConfigError(f"unknown key 'stream.{name}'")


_RUN_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _apply_run(run, name, value):
    if name not in _RUN_FIELD_TYPES:
        raise ConfigError(f"unknown key 'run.{name}'")
    if name == "augment_sources":
        run.augment_sources = tuple(_parse_int_list(value))
        return
    if name == "replay":
        run.replay = None if value.lower() == "none" else value
        return
    if name in ("task_confusion", "warmup", "snapshot"):
        run.__setattr__(name, None if value.lower() == "none" else _parse_bool(value, name))
        return
    current = getattr(run, name)
    if isinstance(current, bool):
        setattr(run, name, _parse_bool(value, name))
    elif isinstance(current, int):
        setattr(run, name, int(value))
    elif isinstance(current, float):
        setattr(run, name, float(value))
    else:
        setattr(run, name, value)


def read_config_file(path, cfg):
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for line_no, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{line_no}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        apply_setting(cfg, key, value)


def build_cli_config(args):
    cfg = default_config()
    if args.config:
        read_config_file(args.config, cfg)
    for setting in args.set or []:
        if "=" not in setting:
            raise ConfigError(f"--set expects key=value, got {setting!r}")
        key, value = setting.split("=", 1)
        apply_setting(cfg, key, value)
    if args.seed is not None:
        cfg.stream.seed = args.seed
        cfg.run.seed = args.seed
    return cfg


def echo_config(cfg, path):
    with open(path, "w") as fh:
        fh.write("# effective configuration (reload with --config to reproduce)\n")
        for key, value in cfg.pairs():
            fh.write(f"{key}={value}\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _build_envs(cfg):
    cfg.stream.validate()
    return build_stream(cfg.stream)


def cmd_generate(args):
    cfg = build_cli_config(args)
    envs = _build_envs(cfg)
    out = args.out or "stream.csv"
    export_csv(envs, out)
    print(f"wrote {sum(len(e.support_y) + len(e.query_x) for e in envs)} rows "
          f"({len(envs)} environments) to {out}")
    return 0


def cmd_run(args):
    cfg = build_cli_config(args)
    out_dir = args.out or "run"
    os.makedirs(out_dir, exist_ok=True)
    run_cfg = cfg.run.resolved()
    if args.stream_csv:
        envs = ingest_csv(args.stream_csv)
        spec = None
    else:
        envs = _build_envs(cfg)
        spec = cfg.stream
    echoed = CliConfig(stream=cfg.stream, run=run_cfg, ablate_seeds=cfg.ablate_seeds)
    echo_config(echoed, os.path.join(out_dir, "config.echo.cfg"))
    result = run_scenario(envs, run_cfg, stream_spec=spec)
    result.metrics.write(os.path.join(out_dir, "metrics.csv"))
    write_bounds_csv(result.bounds, os.path.join(out_dir, "bound.csv"))
    save_checkpoint(os.path.join(out_dir, "checkpoint.npz"), result)
    for env in envs:
        _write_features(result.feature_fn(env.index), env,
                        os.path.join(out_dir, f"features_env{env.index}.csv"))
    final = result.metrics.rows[-1]
    print(f"run complete: method={run_cfg.method} envs={len(envs)} "
          f"steps={final['global_step']} all_seen={final['all_seen_acc']:.3f} -> {out_dir}")
    return 0


def _write_features(feature_fn, env, path):
    h_support = feature_fn(env.support_x)
    h_query = feature_fn(env.query_x)
    with open(path, "w") as fh:
        fh.write("# eval-only: query labels below are hidden evaluation labels\n")
        fh.write("role,label," + ",".join(f"h{i}" for i in range(h_support.shape[1])) + "\n")
        for row, y in zip(h_support, env.support_y):
            fh.write("support," + str(int(y)) + "," + ",".join(repr(float(v)) for v in row) + "\n")
        for row, y in zip(h_query, env.eval_labels()):
            fh.write("query," + str(int(y)) + "," + ",".join(repr(float(v)) for v in row) + "\n")


def cmd_ablate(args):
    cfg = build_cli_config(args)
    out_dir = args.out or "ablation"
    os.makedirs(out_dir, exist_ok=True)
    echo_config(cfg, os.path.join(out_dir, "config.echo.cfg"))
    envs = _build_envs(cfg)
    summary = ["method,seed,config_hash,final_first_task_acc,final_all_seen_acc"]
    curves = ["method,seed,global_step,first_task_acc,all_seen_acc"]
    for method in ABLATION_METHODS:
        for seed in cfg.ablate_seeds:
            run_cfg = dataclasses.replace(cfg.run, method=method, seed=seed,
                                          replay=None, task_confusion=None,
                                          warmup=None, snapshot=None).resolved()
            result = run_scenario(envs, run_cfg, stream_spec=cfg.stream)
            final = result.metrics.rows[-1]
            summary.append(f"{method},{seed},{config_hash(run_cfg)},"
                           f"{final['first_task_acc']!r},{final['all_seen_acc']!r}")
            for row in result.metrics.rows:
                curves.append(f"{method},{seed},{row['global_step']},"
                              f"{row['first_task_acc']!r},{row['all_seen_acc']!r}")
            print(f"{method} seed={seed}: first_task={final['first_task_acc']:.3f} "
                  f"all_seen={final['all_seen_acc']:.3f}")
    with open(os.path.join(out_dir, "ablation.csv"), "w") as fh:
        fh.write("\n".join(summary) + "\n")
    with open(os.path.join(out_dir, "curves.csv"), "w") as fh:
        fh.write("\n".join(curves) + "\n")
    print(f"wrote {len(ABLATION_METHODS)} methods x {len(cfg.ablate_seeds)} seeds -> {out_dir}")
    return 0


def cmd_dump_features(args):
    ck = load_checkpoint(args.checkpoint)
    if args.env not in ck.env_indices:
        raise ConfigError(f"checkpoint has no environment {args.env} "
                          f"(available: {ck.env_indices})")
    env = ck.environment(args.env)
    out = args.out or f"features_env{args.env}.csv"
    _write_features(ck.feature_fn(args.env), env, out)
    print(f"wrote {len(env.support_y) + len(env.query_x)} feature rows to {out}")
    return 0


def cmd_inspect(args):
    ck = load_checkpoint(args.checkpoint)
    meta = ck.meta
    print(f"format: {meta['format']} v{meta['version']}")
    print(f"method: {meta['config']['method']}  seed: {meta['config']['seed']}")
    print(f"environments: {meta['env_indices']}")
    print(f"snapshots: {meta['snapshot_envs']}")
    print(f"optimizer steps: {meta['steps']}")
    n_rows = meta["metrics_csv"].count("\n") - 1
    print(f"metrics rows: {n_rows}")
    if meta["bounds"]:
        last = meta["bounds"][-1]
        print(f"final bound: lhs={last['lhs']:.4f} rhs={last['rhs']:.4f}")
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="driftadapt",
        description="Continual domain adaptation over synthetic support/query streams")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--seed", type=int, help="override stream and run seeds")
        p.add_argument("--out", help="output file or directory")

    common(sub.add_parser("generate", help="write a stream CSV"))
    p_run = sub.add_parser("run", help="train one configured run")
    common(p_run)
    p_run.add_argument("--stream-csv", help="ingest this stream CSV instead of generating")
    common(sub.add_parser("ablate", help="run the full method grid"))
    p_dump = sub.add_parser("dump-features", help="emit features from a checkpoint")
    p_dump.add_argument("checkpoint")
    p_dump.add_argument("--env", type=int, required=True)
    p_dump.add_argument("--out")
    p_ins = sub.add_parser("inspect", help="summarize a checkpoint")
    p_ins.add_argument("checkpoint")

    args = parser.parse_args(argv)
    handlers = {"generate": cmd_generate, "run": cmd_run, "ablate": cmd_ablate,
                "dump-features": cmd_dump_features, "inspect": cmd_inspect}
    try:
        return handlers[args.command](args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, ValueError, OSError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
