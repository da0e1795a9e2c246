"""Command-line pipeline: synth, template, train, infer, mesh, eval.

Every command is deterministic in (config, inputs, seed). Exit codes:
0 success, 2 configuration error, 3 I/O error, 4 training divergence,
5 strict mesh-quality failure, 6 data or wiring mismatch.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import graph as G
from .loss import LossConfig
from .mesher import DEFAULT_LAYERS, export_obj, export_vtk, quality_report, surface_of, sweep_hex
from .metrics import DEFAULT_DENSIFY_STEP, aggregate, evaluate_graphs
from .net import HIDDEN, TemplatePyramid, init_net, load_checkpoint, save_checkpoint
from .sampling import load_volume, save_volume
from .synth import SynthConfig, canonical_graph, make_feature_volume, mask_volume, random_graph, rasterize_tubes
from .train import SamplingConfig, TrainConfig, TrainingDiverged, infer, input_statistics, prepare_case, train

log = logging.getLogger("vasmesh")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_QUALITY, EXIT_MISMATCH = 0, 2, 3, 4, 5, 6


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    seed: int = 0
    n_train: int = 28
    n_test: int = 12
    synth: dict = field(default_factory=dict)
    template_counts: tuple[int, ...] = (5, 9, 9, 12)
    loss: dict = field(default_factory=dict)
    train: dict = field(default_factory=lambda: {"learning_rate": 1e-3, "decay_every": 60, "epochs": 150})
    sampling: dict = field(default_factory=dict)
    hidden: int = HIDDEN
    layers: int = DEFAULT_LAYERS
    ov_threshold: float = 2.0
    densify_step: float = DEFAULT_DENSIFY_STEP

    def synth_config(self) -> SynthConfig:
        return _build(SynthConfig, {**self.synth, "seed": self.seed}, "synth")

    def train_config(self) -> TrainConfig:
        return _build(TrainConfig, {**self.train, "seed": self.seed}, "train")

    def loss_config(self) -> LossConfig:
        return _build(LossConfig, self.loss, "loss")

    def sampling_config(self) -> SamplingConfig:
        d = dict(self.sampling)
        if "scale_factors" in d:
            d["scale_factors"] = tuple(d["scale_factors"])
        return _build(SamplingConfig, d, "sampling")

    def validate(self) -> "PipelineConfig":
        self.synth_config()
        self.train_config()
        self.loss_config()
        self.sampling_config()
        if self.n_train < 0 or self.n_test < 0:
            raise ConfigError("case counts must be non-negative")
        if self.layers < 1 or self.ov_threshold <= 0 or self.densify_step <= 0 or self.hidden < 1:
            raise ConfigError("layers, hidden, ov_threshold and densify_step must be positive")
        if len(self.template_counts) != len(self.synth_config().segment_specs):
            raise ConfigError("template_counts needs one entry per segment")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["template_counts"] = list(self.template_counts)
        return d


def _build(cls, values: dict, section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {section} option(s): {', '.join(sorted(unknown))}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section} section: {exc}") from exc


def load_config(path: str | None, seed: int | None = None) -> PipelineConfig:
    data = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    names = {f.name for f in dataclasses.fields(PipelineConfig)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    cfg = PipelineConfig(**data)
    cfg.template_counts = tuple(int(c) for c in cfg.template_counts)
    if seed is not None:
        cfg.seed = seed
    return cfg.validate()


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def case_seed(seed: int, index: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, index, stream]).generate_state(1)[0])


# ---------------------------------------------------------------- commands


def cmd_synth(cfg: PipelineConfig, out: Path) -> Path:
    """Write ground-truth graphs, masks, three stage feature volumes per case, and a manifest."""
    scfg = cfg.synth_config()
    out.mkdir(parents=True, exist_ok=True)
    canon = canonical_graph(scfg)
    G.save_graph(canon, out / "canonical.json")
    names = []
    for i in range(cfg.n_train + cfg.n_test):
        name = f"case_{i:03d}"
        cdir = out / "cases" / name
        cdir.mkdir(parents=True, exist_ok=True)
        g = random_graph(canon, scfg, seed=case_seed(cfg.seed, i, 0))
        mask = rasterize_tubes(g, scfg.dims, scfg.spacing, scfg.origin)
        mvol = mask_volume(mask, scfg.spacing, scfg.origin)
        G.save_graph(g, cdir / "graph.json")
        save_volume(mvol, cdir / "mask")
        noise_seed = case_seed(cfg.seed, i, 1)
        for s in range(3):
            save_volume(make_feature_volume(mvol, s, seed=noise_seed), cdir / f"feat{s}")
        names.append(name)
    manifest = {
        "seed": cfg.seed,
        "train": names[: cfg.n_train],
        "test": names[cfg.n_train:],
        "config": cfg.to_dict(),
    }
    write_json(out / "manifest.json", manifest)
    log.info("wrote %d cases to %s", len(names), out)
    return out


def load_manifest(dataset: Path) -> dict:
    return json.loads((dataset / "manifest.json").read_text())


def case_volumes(case_dir: Path):
    return [load_volume(case_dir / f"feat{s}") for s in range(3)]


def cmd_template(cfg: PipelineConfig, dataset: Path, out: Path | None = None) -> Path:
    manifest = load_manifest(dataset)
    if not manifest["train"]:
        raise ConfigError("template construction needs at least one training case")
    graphs = [G.load_graph(dataset / "cases" / n / "graph.json") for n in manifest["train"]]
    tmpl = G.build_template(graphs, cfg.template_counts)
    out = out or dataset / "template.json"
    G.save_graph(tmpl, out)
    return out


def cmd_train(cfg: PipelineConfig, dataset: Path, out: Path, template: Path | None = None) -> Path:
    """Train on the manifest's training split; writes the checkpoint and ``<out>.history.json``."""
    manifest = load_manifest(dataset)
    template = template or dataset / "template.json"
    if not template.exists():
        cmd_template(cfg, dataset, template)
    tmpl = G.load_graph(template)
    pyr = TemplatePyramid.from_template(tmpl)
    sampling = cfg.sampling_config()
    loss_cfg = cfg.loss_config()
    tcfg = cfg.train_config()
    cases = [
        prepare_case(case_volumes(dataset / "cases" / n), G.load_graph(dataset / "cases" / n / "graph.json"),
                     pyr, loss_cfg, sampling)
        for n in manifest["train"]
    ]
    channels = load_volume(dataset / "cases" / manifest["train"][0] / "feat0").channels if cases else 3
    net = init_net(sampling.channels_to_in_dim(channels), cfg.hidden, seed=cfg.seed)
    history: list[float] = []
    if cases:
        net.input_norm = input_statistics(cases)
        if tcfg.epochs:
            net, history = train(net, cases, pyr, tcfg,
                                 on_epoch=lambda e, l, lr: log.info("epoch %d lr %.3g loss %.6g", e, lr, l))
    header = {
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "template": G.graph_to_dict(tmpl),
        "sampling": dataclasses.asdict(sampling),
    }
    save_checkpoint(out, net, header)
    history_path = out.with_name(out.name + ".history.json")
    write_json(history_path, [{"epoch": e, "loss": l} for e, l in enumerate(history)])
    return out


def _sampling_from_header(header: dict) -> SamplingConfig:
    d = dict(header["sampling"])
    d["scale_factors"] = tuple(d["scale_factors"])
    return SamplingConfig(**d)


def cmd_infer(checkpoint: Path, case_dirs: list[Path], out: Path, all_scales: bool = False) -> list[Path]:
    net, header = load_checkpoint(checkpoint)
    pyr = TemplatePyramid.from_template(G.graph_from_dict(header["template"]))
    sampling = _sampling_from_header(header)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for cdir in case_dirs:
        result = infer(net, case_volumes(cdir), pyr, sampling)
        path = out / f"{cdir.name}.json"
        G.save_graph(result.finest, path)
        written.append(path)
        if all_scales:
            for level, g in enumerate(result.graphs[:-1]):
                G.save_graph(g, out / f"{cdir.name}_level{level}.json")
    return written


def cmd_mesh(graph_path: Path, out: Path, layers: int = DEFAULT_LAYERS) -> dict:
    g = G.load_graph(graph_path)
    report = G.validate_graph(g)
    if not report.ok:
        raise ValueError(f"{graph_path}: invalid graph ({'; '.join(report.violations)})")
    mesh = sweep_hex(g, layers)
    out.mkdir(parents=True, exist_ok=True)
    export_vtk(mesh, out / "mesh.vtk")
    export_obj(surface_of(mesh), out / "surface.obj")
    q = quality_report(mesh).to_dict()
    q.update({"n_nodes": mesh.n_nodes, "n_surface_quads": len(mesh.surface_quads), "layers": layers})
    write_json(out / "quality.json", q)
    return q


def cmd_eval(cfg: PipelineConfig, dataset: Path, pred_dir: Path, split: str = "test", out: Path | None = None) -> dict:
    manifest = load_manifest(dataset)
    names = manifest[split]
    missing = [n for n in names if not (pred_dir / f"{n}.json").exists()]
    if missing:
        raise LookupError(f"{len(missing)} of {len(names)} cases have no prediction in {pred_dir}")
    per_case, reports = {}, []
    for n in names:
        cdir = dataset / "cases" / n
        gt = G.load_graph(cdir / "graph.json")
        pred = G.load_graph(pred_dir / f"{n}.json")
        mvol = load_volume(cdir / "mask")
        pred_mask = rasterize_tubes(pred, mvol.dims, mvol.spacing, mvol.origin)
        r = evaluate_graphs(pred, gt, cfg.ov_threshold, cfg.densify_step, pred_mask, mvol.data[0])
        per_case[n] = r.to_dict()
        reports.append(r)
    result = {"split": split, "cases": per_case, "aggregate": aggregate(reports)}
    if out is not None:
        write_json(out, result)
    return result


# ---------------------------------------------------------------- argparse


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline JSON config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="vasmesh", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--out", required=True, type=Path)

    s = sub.add_parser("template", parents=[common], help="build the level-0 template from the training split")
    s.add_argument("dataset", type=Path)
    s.add_argument("--out", type=Path)

    s = sub.add_parser("train", parents=[common], help="train the deformation network")
    s.add_argument("dataset", type=Path)
    s.add_argument("--template", type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)

    s = sub.add_parser("infer", parents=[common], help="deform the template for one or more cases")
    s.add_argument("checkpoint", type=Path)
    s.add_argument("cases", nargs="+", type=Path, help="case directories holding feat{0,1,2}.raw/.json")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--all-scales", action="store_true", help="also write the two coarser levels")

    s = sub.add_parser("mesh", parents=[common], help="sweep a graph into hex and surface meshes")
    s.add_argument("graph", type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--layers", type=int)
    s.add_argument("--strict", action="store_true", help="fail when any cell has scaled Jacobian <= 0")

    s = sub.add_parser("eval", parents=[common], help="score predictions against ground truth")
    s.add_argument("dataset", type=Path)
    s.add_argument("--pred", required=True, type=Path, help="directory of <case>.json predictions")
    s.add_argument("--split", default="test", choices=["train", "test"])
    s.add_argument("--out", type=Path)
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, args.seed)
        if args.command == "synth":
            cmd_synth(cfg, args.out)
        elif args.command == "template":
            print(cmd_template(cfg, args.dataset, args.out))
        elif args.command == "train":
            if args.epochs is not None:
                cfg.train = {**cfg.train, "epochs": args.epochs}
            if args.lr is not None:
                cfg.train = {**cfg.train, "learning_rate": args.lr}
            cfg.validate()
            cmd_train(cfg, args.dataset, args.out, args.template)
        elif args.command == "infer":
            for path in cmd_infer(args.checkpoint, args.cases, args.out, args.all_scales):
                print(path)
        elif args.command == "mesh":
            q = cmd_mesh(args.graph, args.out, args.layers or cfg.layers)
            print(json.dumps(q, sort_keys=True))
            if args.strict and q["negative_count"] > 0:
                log.error("%d cells with non-positive scaled Jacobian", q["negative_count"])
                return EXIT_QUALITY
        elif args.command == "eval":
            result = cmd_eval(cfg, args.dataset, args.pred, args.split, args.out)
            print(json.dumps(result["aggregate"], indent=1, sort_keys=True))
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    except (FileNotFoundError, PermissionError, IsADirectoryError, NotADirectoryError) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except (ValueError, LookupError) as exc:
        log.error("%s", exc)
        return EXIT_MISMATCH
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
