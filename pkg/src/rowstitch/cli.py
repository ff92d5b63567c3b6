"""Command-line entry point: ``stitch``, ``synth`` and ``evaluate``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .core import ConfigError, ImageRecord, load_config
from .features import MatchFileError
from .georef import GeorefError, compare_control_points, georeference_report, read_control_points, \
    read_geo_sidecar, write_control_points
from .imaging import IMAGE_SUFFIXES, list_images, read_image, write_image
from .pipeline import PipelineError, run_pipeline
from .row_assembler import AssemblyError
from .sequencer import ChainBreakError
from .synth import Jitter, SynthError, Texture, TrajectorySpec, synthesize, write_dataset

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NO_IMAGES = 3
EXIT_CHAIN_BREAK = 4
EXIT_ASSEMBLY = 5
EXIT_INPUT = 6

log = logging.getLogger("rowstitch")


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _ordered_paths(folder: Path, manifest: Path | None) -> list[Path]:
    if manifest is None:
        return list_images(folder)
    names = [ln.strip() for ln in manifest.read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    paths = [folder / n for n in names]
    missing = [p.name for p in paths if not p.is_file()]
    if missing:
        raise FileNotFoundError(f"manifest lists missing files: {', '.join(missing)}")
    return paths


def _write_lines(path: Path, lines) -> None:
    path.write_text("".join(f"{ln}\n" for ln in lines))


def run_stitch(args: argparse.Namespace) -> int:
    folder = Path(args.input)
    if not folder.is_dir():
        return _fail(EXIT_NO_IMAGES, f"{folder} is not a directory")
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    except (OSError, ValueError) as exc:
        return _fail(EXIT_CONFIG, f"cannot read config: {exc}")

    try:
        paths = _ordered_paths(folder, Path(args.manifest) if args.manifest else None)
    except (OSError, ValueError) as exc:
        return _fail(EXIT_INPUT, str(exc))
    others = sorted(p.name for p in folder.iterdir()
                    if p.is_file() and p.suffix.lower() not in IMAGE_SUFFIXES and p.suffix.lower() in
                    {".tif", ".tiff", ".bmp", ".gif", ".webp"})
    if others:
        return _fail(EXIT_INPUT, f"unsupported image format (PNG/JPEG only): {', '.join(others)}")
    if len(paths) < 2:
        return _fail(EXIT_NO_IMAGES, f"need at least two PNG/JPEG images in {folder}, found {len(paths)}")

    geo = {}
    geo_path = Path(args.geo) if args.geo else folder / "geo.txt"
    if args.geo or geo_path.is_file():
        try:
            geo = read_geo_sidecar(geo_path)
        except (OSError, GeorefError) as exc:
            return _fail(EXIT_INPUT, f"geo sidecar: {exc}")

    images = []
    try:
        for k, p in enumerate(paths):
            images.append(ImageRecord(p.stem, k, read_image(p), geo.get(p.stem)))
    except (OSError, ValueError) as exc:
        return _fail(EXIT_INPUT, str(exc))

    try:
        result = run_pipeline(images, cfg, strict=args.strict, threads=args.threads, matches_dir=args.matches)
    except ChainBreakError as exc:
        return _fail(EXIT_CHAIN_BREAK, f"chain break: {exc}")
    except MatchFileError as exc:
        return _fail(EXIT_INPUT, str(exc))
    except (PipelineError, AssemblyError, ValueError) as exc:
        return _fail(EXIT_ASSEMBLY, f"assembly failed: {exc}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_image(out / "mosaic.png", result.mosaic.pixels)
    _write_lines(out / "transforms.txt", result.transform_lines())
    _write_lines(out / "used.txt", result.used_ids)
    _write_lines(out / "skipped.txt", result.skipped_ids)
    if result.chain.gaps:
        _write_lines(out / "gaps.txt", result.gap_lines())
    if result.control_points:
        write_control_points(out / "control_points.txt", result.control_points)
    if result.georef is not None:
        (out / "georef.txt").write_text(result.georef.to_text())
    if args.verdict_log:
        _write_lines(out / "verdicts.txt", result.verdict_lines)
    if args.debug_dumps:
        for k, (canvas, placements) in enumerate(zip(result.batch_canvases, result.batch_placements)):
            write_image(out / f"batch_{k:03d}.png", canvas.pixels)
            _write_lines(out / f"batch_{k:03d}_transforms.txt",
                         [p.image_id + " " + " ".join(f"{v:.9f}" for v in p.global_transform.m.ravel())
                          for p in placements])
    print(f"stitched {len(result.used_ids)} of {len(images)} images into {result.mosaic.width}x"
          f"{result.mosaic.height} mosaic -> {out / 'mosaic.png'}")
    return EXIT_OK


def _jitter(text: str) -> Jitter:
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 4:
        raise argparse.ArgumentTypeError("expected lateral_px,step_px,roll_deg,scale")
    return Jitter(*parts)


def run_synth(args: argparse.Namespace) -> int:
    try:
        traj = TrajectorySpec(n_frames=args.frames, step_px=args.step, frame_w=args.width, frame_h=args.height,
                              jitter=args.jitter, seed=args.traj_seed if args.traj_seed is not None else args.seed + 1)
        seq = synthesize(traj, seed=args.seed, texture=Texture(args.texture), blob_density=args.density)
    except (SynthError, ValueError) as exc:
        return _fail(EXIT_CONFIG, str(exc))
    out = write_dataset(seq, args.out)
    print(f"wrote {len(seq.images)} frames to {out}")
    return EXIT_OK


def run_evaluate(args: argparse.Namespace) -> int:
    try:
        width = None
        if args.mosaic:
            width = read_image(args.mosaic).shape[1]
        pts_a = read_control_points(args.points)
        if args.points_b:
            pts_b = read_control_points(args.points_b)
            px_per_m = width / args.row_length_m if (args.row_length_m and width) else None
            report = compare_control_points(pts_a, pts_b, px_per_m)
        else:
            if len(pts_a) < 2:
                raise GeorefError(f"{args.points}: need at least two control points")
            report = georeference_report(pts_a)
    except (OSError, ValueError) as exc:
        return _fail(EXIT_INPUT, str(exc))
    text = report.to_text()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rowstitch", description="Stitch crop-row image sequences into a mosaic.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    st = sub.add_parser("stitch", help="stitch an ordered image folder")
    st.add_argument("input", help="folder of PNG/JPEG frames in capture order")
    st.add_argument("--config", help="YAML pipeline configuration")
    st.add_argument("--geo", help="sidecar with 'id latitude longitude' lines (default: <input>/geo.txt if present)")
    st.add_argument("--matches", help="folder of precomputed '<a>__<b>.matches' files")
    st.add_argument("--manifest", help="file listing image names in capture order")
    st.add_argument("--out", default="rowstitch_out", help="output folder")
    st.add_argument("--strict", action="store_true", help="abort on a chain break")
    st.add_argument("--threads", type=int, default=0, help="worker threads (0 = one per CPU)")
    st.add_argument("--debug-dumps", action="store_true", help="write per-batch canvases and transforms")
    st.add_argument("--verdict-log", action="store_true", help="write one line per gated pair")
    st.set_defaults(func=run_stitch)

    sy = sub.add_parser("synth", help="generate a synthetic row dataset")
    sy.add_argument("--seed", type=int, default=0, help="scene seed")
    sy.add_argument("--traj-seed", type=int, default=None, help="trajectory seed (default: seed + 1)")
    sy.add_argument("--frames", type=int, default=200)
    sy.add_argument("--step", type=float, default=160.0, help="mean forward step in px")
    sy.add_argument("--width", type=int, default=640)
    sy.add_argument("--height", type=int, default=480)
    sy.add_argument("--jitter", type=_jitter, default=Jitter(3.0, 10.0, 0.5, 0.005),
                    help="lateral_px,step_px,roll_deg,scale sigmas (default 3,10,0.5,0.005)")
    sy.add_argument("--texture", choices=[t.value for t in Texture], default=Texture.BLOB_FIELD.value)
    sy.add_argument("--density", type=float, default=60.0, help="blobs per 10^4 px^2")
    sy.add_argument("--out", required=True)
    sy.set_defaults(func=run_synth)

    ev = sub.add_parser("evaluate", help="regression reports from control points")
    ev.add_argument("--mosaic", help="mosaic image (its width calibrates --row-length-m)")
    ev.add_argument("--points", required=True, help="control points 'label x y [lat lon]'")
    ev.add_argument("--points-b", help="second run's control points for comparison")
    ev.add_argument("--row-length-m", type=float, help="row length in meters for cm conversion")
    ev.add_argument("--out", help="write the report here as well")
    ev.set_defaults(func=run_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
