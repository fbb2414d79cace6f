"""Command-line entry points.

Mirrors the HTTP service for offline use (the session-* commands operate on a
directory-backed store) and exposes the batch tooling: ingestion, triplet
generation, training, evaluation, and single-shot reshaping.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import body_model as bmod
from .body_model import SemanticSliders
from .errors import BodyReshapeError
from .fitting import FitConfig
from .ingest import (
    FixtureInitialEstimator,
    FixtureKeypointDetector,
    FixturePersonSegmenter,
    Manifest,
    load_image_file,
    load_manifest,
    record_to_row,
    row_to_record,
    save_image_file,
    save_manifest,
    split_manifest,
)
from .pipeline import ReshapePipeline


def _load_model(args):
    if getattr(args, "model_config", None):
        return bmod.load_model(args.model_config)
    return bmod.build_synthetic_model()


def _parse_sliders(expr: str) -> SemanticSliders:
    values = {}
    if expr:
        for part in expr.split(","):
            key, _, val = part.partition("=")
            key = key.strip()
            if not key.startswith("d_"):
                key = "d_" + key
            if key not in SemanticSliders.RANGES:
                raise BodyReshapeError(f"unknown slider {key!r}")
            values[key] = float(val)
    return SemanticSliders(**values)


def _build_pipeline(args, model, generator=None) -> ReshapePipeline:
    calib = bmod.load_or_calibrate(model, getattr(args, "calibration_cache", None))
    fixtures = getattr(args, "fixtures", None)
    kp = FixtureKeypointDetector(fixtures) if fixtures else None
    seg = FixturePersonSegmenter(fixtures) if fixtures else None
    est = FixtureInitialEstimator(fixtures) if fixtures else None
    fit_cfg = FitConfig(iters=tuple(getattr(args, "fit_iters", (100, 100))))
    return ReshapePipeline(
        model,
        calib,
        generator=generator,
        keypoint_adapter=kp,
        segment_adapter=seg,
        initial_estimator=est,
        fit_config=fit_cfg,
        target_resolution=getattr(args, "resolution", 256),
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_make_model(args):
    model = bmod.build_synthetic_model()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bmod.save_model_archive(model, out / "body_model.npz")
    config = {
        "asset": "body_model.npz",
        "up_axis": model.up_axis,
        "thigh_ring": list(model.thigh_ring),
        "density": model.density,
    }
    (out / "model_config.json").write_text(json.dumps(config, indent=2))
    print(f"wrote {out / 'body_model.npz'} and model_config.json")


def cmd_calibrate(args):
    model = _load_model(args)
    calib = bmod.calibrate_semantic_map(model)
    bmod.save_calibration(calib, args.out)
    print(f"calibration saved to {args.out} (matrix rank 4, base measures {calib.base_measures.round(2)})")


def cmd_ingest(args):
    model = _load_model(args)
    pipeline = _build_pipeline(args, model)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    image_paths = sorted(Path(args.images).glob("*.png")) + sorted(Path(args.images).glob("*.jpg"))
    for path in image_paths:
        image_id = path.stem
        try:
            image = load_image_file(path)
            outcome = pipeline.preprocess(image, image_id)
            record = outcome.record
            from .ingest import filter_record

            verdict, reason = filter_record(record, model)
            if verdict == "reject":
                record.status = "rejected"
                record.reject_reason = reason
            crop_path = out_dir / f"{image_id}.png"
            save_image_file(record.image, crop_path)
            import cv2

            cv2.imwrite(str(crop_path) + ".mask.png", record.mask.mask * 255)
            record.image_path = str(crop_path)
            rows.append(record_to_row(record))
            print(f"{image_id}: {record.status}" + (f" ({reason})" if reason else ""))
        except BodyReshapeError as exc:
            print(f"{image_id}: skipped ({exc})")
    manifest = Manifest(records=rows, split="all", stats={"count": len(rows)})
    save_manifest(manifest, args.out_manifest)
    if args.split:
        train, test = split_manifest(manifest, args.split_ratio, seed=args.seed)
        save_manifest(train, str(args.out_manifest) + ".train")
        save_manifest(test, str(args.out_manifest) + ".test")
    print(f"manifest with {len(rows)} records -> {args.out_manifest}")


def cmd_make_triplets(args):
    from .selfsup import TripletFactory
    from .warpfield import save_field

    model = _load_model(args)
    factory = TripletFactory(model)
    manifest = load_manifest(args.manifest)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, row in enumerate(manifest.records):
        if row.get("status") != "ready":
            continue
        record = row_to_record(row, load_image=True)
        triplet = factory.make(record, args.seed + i)
        stem = out_dir / record.image_id
        save_image_file(triplet.i_b, f"{stem}_background.png")
        save_image_file(triplet.i_f_t, f"{stem}_foreground.png")
        save_image_file(triplet.target, f"{stem}_target.png")
        import cv2

        cv2.imwrite(f"{stem}_union.png", triplet.a.a * 255)
        save_field(triplet.t_t, f"{stem}_field.raw")
        print(f"{record.image_id}: triplet written")


def cmd_train(args):
    from .trainer import TrainConfig, train

    model = _load_model(args)
    manifest = load_manifest(args.manifest)
    records = [row_to_record(r, load_image=True) for r in manifest.records if r.get("status") == "ready"]
    overrides = json.loads(Path(args.config).read_text()) if args.config else {}
    config = TrainConfig(
        variant=args.variant,
        resolution=args.resolution,
        epochs=overrides.get("epochs", 100),
        batch_size=overrides.get("batch_size", 8),
        seed=overrides.get("seed", 0),
        max_steps=overrides.get("max_steps"),
        lambda_recovery=overrides.get("lambda_recovery", 100.0),
        lambda_gan=overrides.get("lambda_gan", 10.0),
        lr_generator=overrides.get("lr_generator", 1e-4),
        lr_discriminator=overrides.get("lr_discriminator", 4e-4),
    )
    ck = train(records, config, args.out_dir, model)
    print(f"final checkpoint: {ck}")


def cmd_evaluate(args):
    from .evalsuite import RandomProjectionEmbedder, extract_features, fid, REFERENCE_FID_SCORES
    from .generator import load_checkpoint
    from .selfsup import TripletFactory
    from .trainer import TripletBatcher
    import torch

    model = _load_model(args)
    manifest = load_manifest(args.manifest)
    records = [row_to_record(r, load_image=True) for r in manifest.records if r.get("status") == "ready"]
    gen = load_checkpoint(args.checkpoint)
    factory = TripletFactory(model)
    report_dir = Path(args.report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)

    originals, generated = [], []
    batcher = TripletBatcher(gen, records[0].image.shape[0]) if records else None
    from .generator import composite, field_to_grids, img_to_tensor, tensor_to_img

    for i, rec in enumerate(records):
        t = factory.make(rec, args.seed + i)
        with torch.no_grad():
            grids = field_to_grids(t.t_t, gen.level_resolutions(*t.target.shape[:2]))
            out = gen(
                img_to_tensor(t.i_f_t),
                img_to_tensor(t.i_b),
                img_to_tensor(t.a.a.astype(np.float32)),
                grids,
                fg_mask=img_to_tensor(t.deformed_mask.astype(np.float32)),
            )
        recon = composite(img_to_tensor(t.target), out, img_to_tensor(t.a.a.astype(np.float32)))
        originals.append(t.target)
        generated.append(tensor_to_img(recon))

    embedder = RandomProjectionEmbedder(seed=args.seed)
    report = {"reference_fid": REFERENCE_FID_SCORES, "count": len(records)}
    if len(records) >= 2:
        stats_real = extract_features(originals, embedder)
        stats_fake = extract_features(generated, embedder)
        report["fid_desk_scale"] = fid(stats_real, stats_fake)
    if originals:
        from .evalsuite import save_image_grid

        grid_rows = [[o, g] for o, g in zip(originals[:8], generated[:8])]
        save_image_grid(grid_rows, report_dir / "before_after_grid.png")
        report["grid"] = "before_after_grid.png"
    (report_dir / "report.json").write_text(json.dumps(report, indent=2))
    print(json.dumps(report, indent=2))


def cmd_reshape(args):
    from .generator import load_checkpoint

    model = _load_model(args)
    generator = load_checkpoint(args.checkpoint) if args.checkpoint else None
    calib = bmod.load_or_calibrate(model, getattr(args, "calibration_cache", None))
    pipeline = ReshapePipeline(model, calib, generator=generator)
    row = json.loads(Path(args.fit).read_text())
    record = row_to_record(row, load_image=True)
    sliders = _parse_sliders(args.sliders)
    outcome = pipeline.reshape(record, sliders)
    save_image_file(outcome.image, args.out)
    print(f"reshaped -> {args.out} (edit {sliders.as_dict()})")


def cmd_make_demo(args):
    """Write synthetic demo images + adapter fixtures + a serving checkpoint."""
    import torch

    from .demo import write_scene_fixtures
    from .generator import Generator, GeneratorConfig, save_checkpoint

    model = _load_model(args)
    out = Path(args.out)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    ids = write_scene_fixtures(
        model,
        seeds,
        out / "fixtures",
        out / "images",
        resolution=args.scene_resolution,
        two_person_id="pair" if args.two_person else None,
    )
    torch.manual_seed(args.seed)
    g = Generator(GeneratorConfig(input_resolution=args.resolution)).eval()
    save_checkpoint(out / "checkpoint.pt", g, meta={"note": "untrained demo weights"})
    print(json.dumps({"ids": ids, "out": str(out)}))


def cmd_serve(args):
    import uvicorn

    from .generator import load_checkpoint
    from .server import SessionService, create_app

    model = _load_model(args)
    generator = load_checkpoint(args.checkpoint) if args.checkpoint else None
    args.fit_iters = tuple(args.fit_iters)
    pipeline = _build_pipeline(args, model, generator)
    service = SessionService(pipeline)
    app = create_app(service)
    if args.frontend_dir:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=args.frontend_dir, html=True), name="ui")
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")


# -- offline session mirror ---------------------------------------------------


def _session_dir(store: str, session_id: str) -> Path:
    return Path(store) / session_id


def cmd_session_create(args):
    from .generator import load_checkpoint
    from .server import SessionService

    model = _load_model(args)
    generator = load_checkpoint(args.checkpoint) if args.checkpoint else None
    pipeline = _build_pipeline(args, model, generator)
    service = SessionService(pipeline)
    session = service.create_session(
        Path(args.image).read_bytes(), background=False, image_key=Path(args.image).stem
    )
    payload = service.status_payload(session.id)
    sdir = _session_dir(args.store, session.id)
    sdir.mkdir(parents=True, exist_ok=True)
    (sdir / "status.json").write_text(json.dumps(payload, indent=2))
    if session.record is not None:
        session.record.image_path = str(sdir / "crop.png")
        (sdir / "record.json").write_text(json.dumps(record_to_row(session.record)))
        save_image_file(session.record.image, sdir / "crop.png")
        import cv2

        cv2.imwrite(str(sdir / "crop.png.mask.png"), session.record.mask.mask * 255)
    print(session.id)


def cmd_session_status(args):
    print((_session_dir(args.store, args.id) / "status.json").read_text())


def cmd_session_reshape(args):
    from .generator import load_checkpoint

    model = _load_model(args)
    generator = load_checkpoint(args.checkpoint) if args.checkpoint else None
    calib = bmod.load_or_calibrate(model, getattr(args, "calibration_cache", None))
    pipeline = ReshapePipeline(model, calib, generator=generator)
    sdir = _session_dir(args.store, args.id)
    row = json.loads((sdir / "record.json").read_text())
    row["image_path"] = str(sdir / "crop.png")
    record = row_to_record(row, load_image=True)
    sliders = _parse_sliders(args.sliders)
    outcome = pipeline.reshape(record, sliders)
    import hashlib

    from .ingest import encode_image_png

    png = encode_image_png(outcome.image)
    result_id = hashlib.sha256(png).hexdigest()[:16]
    (sdir / f"result_{result_id}.png").write_bytes(png)
    history_path = sdir / "history.json"
    history = json.loads(history_path.read_text()) if history_path.exists() else []
    history.append({"sliders": sliders.as_dict(), "result_id": result_id})
    history_path.write_text(json.dumps(history, indent=2))
    print(result_id)


def cmd_session_result(args):
    data = (_session_dir(args.store, args.id) / f"result_{args.result_id}.png").read_bytes()
    Path(args.out).write_bytes(data)
    print(args.out)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bodyreshape", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-model", help="write the synthetic body model archive + config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_model)

    p = sub.add_parser("calibrate", help="compute and cache the semantic slider calibration")
    p.add_argument("--model-config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("ingest", help="run adapters + filtering + cropping, write a manifest")
    p.add_argument("--images", required=True)
    p.add_argument("--fixtures", required=True)
    p.add_argument("--out-manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--model-config")
    p.add_argument("--split", action="store_true")
    p.add_argument("--split-ratio", type=float, default=0.85)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("make-triplets", help="write self-supervised triplets for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model-config")
    p.set_defaults(func=cmd_make_triplets)

    p = sub.add_parser("train", help="train the generator on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--variant", default="full", choices=["full", "G-", "M+", "C-"])
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--config", help="JSON file with TrainConfig overrides")
    p.add_argument("--model-config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="desk-scale evaluation report (FID harness)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--report-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model-config")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("reshape", help="one-shot reshape of a fitted record")
    p.add_argument("--image", help="unused when --fit carries the crop path")
    p.add_argument("--fit", required=True, help="record JSON (manifest row)")
    p.add_argument("--sliders", default="", help="e.g. 'height=5,weight=-10'")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model-config")
    p.set_defaults(func=cmd_reshape)

    p = sub.add_parser("make-demo", help="write synthetic demo images, fixtures, and a checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="11,12")
    p.add_argument("--two-person", action="store_true")
    p.add_argument("--scene-resolution", type=int, default=192)
    p.add_argument("--resolution", type=int, default=128, help="generator input resolution")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model-config")
    p.set_defaults(func=cmd_make_demo)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8008)
    p.add_argument("--checkpoint")
    p.add_argument("--fixtures")
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--fit-iters", type=int, nargs=2, default=[100, 100], metavar=("KP", "SIL"))
    p.add_argument("--model-config")
    p.add_argument("--frontend-dir")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("session-create", help="offline mirror of POST /api/sessions")
    p.add_argument("--image", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--fixtures", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--model-config")
    p.set_defaults(func=cmd_session_create)

    p = sub.add_parser("session-status", help="offline mirror of GET /api/sessions/{id}")
    p.add_argument("--store", required=True)
    p.add_argument("--id", required=True)
    p.set_defaults(func=cmd_session_status)

    p = sub.add_parser("session-reshape", help="offline mirror of POST .../reshape")
    p.add_argument("--store", required=True)
    p.add_argument("--id", required=True)
    p.add_argument("--sliders", default="")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--model-config")
    p.set_defaults(func=cmd_session_reshape)

    p = sub.add_parser("session-result", help="offline mirror of GET .../results/{rid}")
    p.add_argument("--store", required=True)
    p.add_argument("--id", required=True)
    p.add_argument("--result-id", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_session_result)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (BodyReshapeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
