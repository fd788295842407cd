"""Command-line entry point: ``mccad synth|train|detect|eval``.

Exit codes: 0 success, 2 usage or input error, 3 internal invariant violation.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

from .candidates import write_candidates_csv
from .cascade import ModelLayoutError, check_layout, model_params, pmap, prepare_case, run_cascade, train_cascade
from .classifier import ModelFormatError, load_model, save_model
from .config import RunConfig, load_config
from .evaluation import InvariantViolation, compute_froc, score_result, sensitivity_at, write_froc
from .image_core import FormatError, Image2D, load_any, write_pgm, write_spacing_sidecar, write_volume
from .phantom import dataset_specs, synth_phantom
from .truth import read_truth, write_truth

log = logging.getLogger("mccad")

MANIFEST = "manifest.json"
RESOLVED = "resolved_config.json"


class UsageError(Exception):
    pass


def _resolve(args) -> RunConfig:
    try:
        cfg = load_config(args.config)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {args.config}") from None
    except ValueError as e:
        raise UsageError(f"invalid config: {e}") from None
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "jobs", None) is not None:
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        cfg = replace(cfg, jobs=args.jobs)
    return cfg


def _write_resolved(cfg: RunConfig, directory) -> None:
    Path(directory, RESOLVED).write_text(cfg.dumps())


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _resolve(args)
    spec = cfg.synth.phantom
    try:
        if args.n is not None:
            cfg = replace(cfg, synth=replace(cfg.synth, n_cases=args.n))
        if args.nz is not None:
            spec = replace(spec, nz=args.nz)
        specs = dataset_specs(spec, cfg.synth.n_cases, cfg.seed, cfg.synth.positive_every)
    except ValueError as e:
        raise UsageError(f"invalid phantom spec: {e}") from None
    cfg = replace(cfg, synth=replace(cfg.synth, phantom=spec))
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise UsageError(f"output path is not a directory: {out}")
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(prefix=".synth-", dir=out.parent))
    except OSError as e:
        raise UsageError(f"cannot write to {out}: {e}") from None
    try:
        results = pmap(synth_phantom, specs, cfg.jobs)
        cases = []
        for i, (s, (data, truths)) in enumerate(zip(specs, results)):
            stem = f"case_{i:04d}"
            if isinstance(data, Image2D):
                image = stem + ".pgm"
                write_pgm(tmp / image, data)
                write_spacing_sidecar(tmp / image, data.spacing)
            else:
                image = stem + ".mcvol"
                write_volume(tmp / image, data)
            write_truth(tmp / (stem + ".truth.json"), truths)
            cases.append({"image": image, "truth": stem + ".truth.json", "seed": s.seed,
                          "groups": len(truths)})
        manifest = {"seed": cfg.seed, "n_cases": len(cases), "phantom": spec.to_dict(),
                    "cases": cases}
        (tmp / MANIFEST).write_text(json.dumps(manifest, indent=1) + "\n")
        _write_resolved(cfg, tmp)
        out.mkdir(exist_ok=True)
        for f in sorted(tmp.iterdir()):
            os.replace(f, out / f.name)
    except ValueError as e:
        raise UsageError(f"invalid phantom spec: {e}") from None
    except OSError as e:
        raise UsageError(f"cannot write to {out}: {e}") from None
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    print(f"wrote {len(specs)} cases to {out}")
    return 0


# ---------------------------------------------------------------------------
# dataset helpers
# ---------------------------------------------------------------------------

def _dataset_cases(directory) -> list[tuple[Path, Path]]:
    d = Path(directory)
    if not d.is_dir():
        raise UsageError(f"dataset directory not found: {d}")
    mpath = d / MANIFEST
    if not mpath.exists():
        raise UsageError(f"no {MANIFEST} in {d}")
    try:
        manifest = json.loads(mpath.read_text())
        pairs = [(d / c["image"], d / c["truth"]) for c in manifest["cases"]]
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise UsageError(f"malformed manifest {mpath}: {e}") from None
    if not pairs:
        raise UsageError(f"dataset {d} lists no cases")
    for img, tr in pairs:
        if not img.exists():
            raise UsageError(f"missing image {img}")
        if not tr.exists():
            raise UsageError(f"missing truth file {tr}")
    return pairs


def _load_case(pair, spacing=None):
    img, tr = pair
    try:
        return load_any(img, spacing), read_truth(tr)
    except (FormatError, ValueError, KeyError) as e:
        raise UsageError(f"cannot read {img}: {e}") from None


# ---------------------------------------------------------------------------
# train / detect / eval
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _resolve(args)
    pipeline = cfg.pipeline
    if args.normalization:
        pipeline = pipeline.with_normalization(args.normalization)
        cfg = replace(cfg, pipeline=pipeline)
    pairs = _dataset_cases(args.dataset)
    dataset = [_load_case(p) for p in pairs]
    try:
        model = train_cascade(dataset, pipeline, cfg.training, cfg.seed, cfg.jobs)
    except ValueError as e:
        raise UsageError(f"training failed: {e}") from None
    for s in model.stages:
        n, npos = model.params["samples"][f"stage{s.stage}"]
        print(f"stage {s.stage}: {n} samples ({npos} positive), threshold {s.threshold!r}")
    out = Path(args.model)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    Path(str(out) + ".config.json").write_text(cfg.dumps())
    print(f"model written to {out}")
    return 0


def _load_model_checked(path):
    try:
        model = load_model(path)
        check_layout(model)
        return model, model_params(model)
    except FileNotFoundError:
        raise UsageError(f"model file not found: {path}") from None
    except (ModelFormatError, ModelLayoutError, ValueError) as e:
        raise UsageError(f"unusable model {path}: {e}") from None


def detection_records(result) -> list[dict]:
    out = []
    for h in result.detections:
        members = [result.cands[i] for i in h.member_ids]
        out.append({
            "prob": h.prob,
            "centroid_mm": list(h.centroid(result.cands)),
            "bbox_mm": {"min": list(h.bbox_min), "max": list(h.bbox_max)},
            "members": [{"x_mm": c.x, "y_mm": c.y, "z_mm": c.z, "slice": c.slice_index,
                         "prob": c.prob} for c in members]})
    return out


def cmd_detect(args) -> int:
    cfg = _resolve(args)
    model, params = _load_model_checked(args.model)
    spacing = (args.spacing_mm, args.spacing_mm) if args.spacing_mm else None
    try:
        data = load_any(args.input, spacing)
    except FileNotFoundError:
        raise UsageError(f"input not found: {args.input}") from None
    except (FormatError, ValueError) as e:
        raise UsageError(f"cannot read {args.input}: {e}") from None
    mode = "2d" if isinstance(data, Image2D) else "3d"
    log.info("mode=%s input=%s", mode, args.input)
    try:
        result = run_cascade(model, data, params=params, jobs=cfg.jobs)
    except ValueError as e:
        raise UsageError(f"model/input mismatch: {e}") from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        json.dump({"mode": mode, "counts": result.counts, "detections": detection_records(result)},
                  fh, indent=1)
        fh.write("\n")
    if args.dump_candidates:
        write_candidates_csv(args.dump_candidates, result.cands)
    print(f"mode={mode} candidates={result.counts['candidates']} "
          f"detections={len(result.detections)} -> {out}")
    return 0


def _eval_model(model, params, pairs, jobs, hit):
    def work(pair):
        data, truths = _load_case(pair)
        return score_result(run_cascade(model, data, params=params), truths)

    try:
        scored = pmap(work, pairs, jobs)
    except ModelLayoutError as e:
        raise UsageError(f"model/input mismatch: {e}") from None
    if not any(s.truths for s in scored):
        raise UsageError("dataset has no truth groups to score")
    return compute_froc(scored, hit)


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    model, params = _load_model_checked(args.model)
    pairs = _dataset_cases(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runs = [("froc", model, params)]
    if args.ablation == "global-norm":
        if args.ablation_model:
            amodel, aparams = _load_model_checked(args.ablation_model)
        else:
            log.warning("no --ablation-model: rerunning the main model with global normalization")
            amodel, aparams = model, params
        runs.append(("froc_global_norm", amodel, aparams.with_normalization("global")))
    summary = {}
    for name, m, p in runs:
        curve = _eval_model(m, p, pairs, cfg.jobs, cfg.evaluation.hit)
        write_froc(out / f"{name}.csv", curve, name)
        sens = {f"sens@FP={k:g}": sensitivity_at(curve, k) for k in cfg.evaluation.fp_rates}
        summary[name] = sens
        print(f"{name}: " + " ".join(f"{k}: {v:.4f}" for k, v in sens.items()))
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    _write_resolved(cfg, out)
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mccad", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="TOML run configuration")
        sp.add_argument("--seed", type=int, help="overrides config and MCCAD_SEED")
        sp.add_argument("--jobs", type=int, help="per-case (or per-slice) worker threads")

    s = sub.add_parser("synth", help="write a phantom dataset with truth and manifest")
    common(s)
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, help="number of cases")
    s.add_argument("--nz", type=int, help="slices per case (1 = 2D)")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train the three-stage cascade")
    common(t)
    t.add_argument("--dataset", required=True)
    t.add_argument("--model", required=True, help="output model JSON")
    t.add_argument("--normalization", choices=("scope", "global"))
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("detect", help="detect groups in one image or volume")
    common(d)
    d.add_argument("--model", required=True)
    d.add_argument("--input", required=True)
    d.add_argument("--out", required=True, help="detections JSON")
    d.add_argument("--dump-candidates", metavar="CSV")
    d.add_argument("--spacing-mm", type=float, help="pixel spacing for PGM input")
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("eval", help="batch detection, FROC and summary")
    common(e)
    e.add_argument("--model", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", required=True, help="report directory")
    e.add_argument("--ablation", choices=("global-norm",))
    e.add_argument("--ablation-model", help="cascade trained with global normalization")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except InvariantViolation as e:
        print(f"invariant violation: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
