"""End-to-end orchestration, run manifests and the per-pixel signature plot."""

from __future__ import annotations

import contextlib
import csv
import hashlib
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import __version__
from .config import RunConfig
from .core import SpectralCube, read_cube, write_cube, write_stack, write_tensor
from .forward import simulate_stack
from .losses import evaluate
from .preprocess import align_stack, preprocess_pipeline
from .reconstruct import load_params, predict, variational_reconstruct
from .scene import SceneSpec, synth

log = logging.getLogger(__name__)

ARTIFACTS = {"scene": "scene.cube", "stack": "stack.stack", "input": "input.tensor",
             "reconstruction": "recon.cube", "report": "report.json"}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@contextlib.contextmanager
def stage(name: str):
    t = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc
    log.info("%s done in %.2f s", name, time.perf_counter() - t)


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command: str, argv, config: RunConfig | None, inputs=(), outputs=(),
                   extra: dict | None = None) -> dict:
    """Record what a run read, wrote and was configured with.

    File digests make replays checkable; the config dict plus argv are enough to
    re-run. Environment details are informational.
    """
    manifest = {
        "tool": "spectrasweep",
        "version": __version__,
        "command": command,
        "argv": list(argv),
        "config": config.to_dict() if config is not None else None,
        "inputs": {os.fspath(p): sha256(p) for p in inputs},
        "outputs": {os.fspath(p): sha256(p) for p in outputs},
        "environment": {"python": platform.python_version(), "numpy": np.__version__,
                        "threads": os.environ.get("SPECTRASWEEP_THREADS")},
    }
    if extra:
        manifest.update(extra)
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def scene_for(config: RunConfig) -> SpectralCube:
    H, W = config.size
    s = config.scene
    return synth(SceneSpec(H, W, config.bands, n_random_shapes=s.n_shapes, background=s.background, seed=s.seed))


def run_pipeline(config: RunConfig, out_dir, argv=()) -> dict:
    """synth -> simulate -> preprocess -> reconstruct -> eval, writing every artifact to ``out_dir``.

    Returns the manifest. Any stage failure raises ``StageError`` naming the stage.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / v for k, v in ARTIFACTS.items()}
    timings = {}

    t0 = time.perf_counter()
    with stage("synth"):
        truth = scene_for(config)
        write_cube(truth, paths["scene"])
    with stage("simulate"):
        schedule = config.schedule()
        stack = simulate_stack(truth, config.lens, config.geometry, schedule, noise=config.noise,
                               emit_unaligned=config.magnify, psf=config.solver.psf)
        write_stack(stack, paths["stack"])
    with stage("preprocess"):
        if config.align:
            stack, _, _ = align_stack(stack)
        model_input = preprocess_pipeline(stack, align=False, raw_frames=config.raw_frames)
        write_tensor(model_input, paths["input"])
    with stage("reconstruct"):
        if config.method == "variational":
            recon = variational_reconstruct(stack, config.lens, config.geometry, schedule, truth.bands,
                                            config=config.solver).cube
        else:
            recon = predict(load_params(config.checkpoint), model_input, truth.bands)
        write_cube(recon, paths["reconstruction"])
    with stage("eval"):
        # score what was written, so the report matches the files on disk
        report = evaluate([read_cube(paths["reconstruction"])], [read_cube(paths["scene"])])
        paths["report"].write_text(json.dumps(report.to_json(), indent=2) + "\n", encoding="utf-8")
    timings["total_s"] = round(time.perf_counter() - t0, 3)
    log.info("pipeline finished:\n%s", report.table())
    return write_manifest(out / "manifest.json", "pipeline", argv, config,
                          outputs=[paths[k] for k in ARTIFACTS],
                          extra={"artifacts": {k: v for k, v in ARTIFACTS.items()}, "timing": timings})


def replay(manifest_path, out_dir) -> tuple[dict, bool]:
    """Re-run a recorded pipeline into ``out_dir``; True when every artifact is bit-identical."""
    recorded = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    if recorded.get("command") != "pipeline":
        raise ValueError(f"only pipeline manifests can be replayed, got {recorded.get('command')!r}")
    fresh = run_pipeline(RunConfig.from_dict(recorded["config"]), out_dir, argv=sys.argv)
    old = {Path(p).name: h for p, h in recorded["outputs"].items()}
    new = {Path(p).name: h for p, h in fresh["outputs"].items()}
    return fresh, old == new


# ---------------------------------------------------------------------------
# per-pixel spectral signature


def plot_signature(pred: SpectralCube, truth: SpectralCube, pixel: tuple[int, int], out_prefix) -> tuple[Path, Path]:
    """Write ``<prefix>.csv`` (wavelength_nm, truth, prediction) and a two-series ``<prefix>.svg``."""
    x, y = pixel
    L, H, W = truth.data.shape
    if pred.data.shape != truth.data.shape:
        raise ValueError(f"prediction {pred.data.shape} and truth {truth.data.shape} differ in shape")
    if not (0 <= x < W and 0 <= y < H):
        raise ValueError(f"pixel ({x}, {y}) outside the {W}x{H} image")
    wl = truth.bands.array
    t, p = truth.data[:, y, x], pred.data[:, y, x]
    prefix = Path(out_prefix)
    csv_path, svg_path = prefix.with_suffix(".csv"), prefix.with_suffix(".svg")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["wavelength_nm", "truth", "prediction"])
        for row in zip(wl, t, p):
            w.writerow([repr(float(v)) for v in row])
    svg_path.write_text(_svg_chart(wl, {"truth": t, "prediction": p}, f"pixel ({x}, {y})"), encoding="utf-8")
    return csv_path, svg_path


def _svg_chart(xs, series: dict, title: str, width: int = 480, height: int = 300) -> str:
    ml, mr, mt, mb = 50, 20, 30, 40
    x0, x1 = float(xs[0]), float(xs[-1]) if len(xs) > 1 else float(xs[0]) + 1.0
    ymax = max(float(np.max(v)) for v in series.values())
    ymax = ymax if ymax > 0 else 1.0

    def px(x):
        return ml + (x - x0) / (x1 - x0) * (width - ml - mr)

    def py(v):
        return height - mb - v / ymax * (height - mt - mb)

    colors = ("#1f77b4", "#d62728")
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
             f'<line x1="{ml}" y1="{height - mb}" x2="{width - mr}" y2="{height - mb}" stroke="black"/>',
             f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{height - mb}" stroke="black"/>',
             f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" font-size="11">wavelength (nm)</text>',
             f'<text x="{ml - 4}" y="{height - mb}" text-anchor="end" font-size="10">0</text>',
             f'<text x="{ml - 4}" y="{mt + 4}" text-anchor="end" font-size="10">{ymax:.3g}</text>',
             f'<text x="{ml}" y="{height - mb + 14}" text-anchor="middle" font-size="10">{x0:.0f}</text>',
             f'<text x="{width - mr}" y="{height - mb + 14}" text-anchor="middle" font-size="10">{x1:.0f}</text>']
    for i, (name, vals) in enumerate(series.items()):
        pts = " ".join(f"{px(float(a)):.2f},{py(float(b)):.2f}" for a, b in zip(xs, vals))
        c = colors[i % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{width - mr - 90}" y="{mt + 14 * (i + 1)}" font-size="11" fill="{c}">'
                     f'{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
