"""HTTP service exposing the pipeline: dataset generation, training, evaluation.

Every operation is a synchronous POST; request bodies carry the raw config
text plus overrides so the server owns parsing and validation. Artifacts
(datasets, checkpoints, CSVs) are written on the server's filesystem under
the requested output directory, and responses return their paths together
with summary values.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import databench, sampler, trainer
from .core import ABLATIONS, ConfigError, RngStream, RunConfig, parse_config_text
from .fusion import build_target_batch, fuse
from .imaging import read_ppm, write_pgm
from .model import load_checkpoint
from .pseudo import ClassPriorState, thresholds
from .trainer import momentum_predictions


class ConfigPayload(BaseModel):
    config_text: str = ""
    overrides: dict[str, str] = Field(default_factory=dict)


class GenDataRequest(BaseModel):
    out_dir: str
    count_source: int = 200
    count_target: int = 200
    count_target_val: int = 100
    height: int = 64
    width: int = 64
    seed: int = 0


class GenDataResponse(BaseModel):
    manifest: str
    count_source: int
    count_target: int
    count_target_val: int


class PretrainRequest(ConfigPayload):
    data_root: str
    out_dir: str


class PretrainResponse(BaseModel):
    checkpoint: str
    metrics_csv: str
    iterations: int
    final_source_loss: float | None


class AdaptRequest(ConfigPayload):
    data_root: str
    out_dir: str
    pretrain_checkpoint: str
    priors_path: str | None = None


class AdaptResponse(BaseModel):
    checkpoint_phi: str
    checkpoint_psi: str
    metrics_csv: str
    history_csv: str
    priors_path: str | None
    final_miou: float | None


class EvalRequest(BaseModel):
    checkpoint: str
    data_root: str
    split: str = "target_val"
    out_csv: str | None = None


class EvalResponse(BaseModel):
    class_names: list[str]
    iou: list[float | None]
    miou: float
    csv_path: str | None


class InspectRequest(ConfigPayload):
    out_dir: str
    checkpoint: str | None = None
    image: str | None = None


class InspectResponse(BaseModel):
    curve_csv: str
    theta_at_002: float
    dumps: list[str]


class SweepRequest(ConfigPayload):
    data_root: str
    out_dir: str
    pretrain_checkpoint: str


class SweepResponse(BaseModel):
    zeta_values: list[float]
    beta_values: list[float]
    miou: list[list[float]]
    csv_path: str


class AblationInfo(BaseModel):
    flag: str
    description: str


SWEEP_ZETAS = [0.7, 0.75, 0.8]
SWEEP_BETAS = [1e-4, 1e-3, 1e-2]


def _parse_config(payload: ConfigPayload) -> RunConfig:
    try:
        cfg = parse_config_text(payload.config_text)
        return cfg.apply_overrides(payload.overrides)
    except ConfigError as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc


def _runtime_error(exc: Exception) -> HTTPException:
    return HTTPException(status_code=500, detail=f"{type(exc).__name__}: {exc}")


def _class_names(k: int) -> list[str]:
    if k == len(databench.CLASS_NAMES):
        return list(databench.CLASS_NAMES)
    return [f"class_{c}" for c in range(k)]


def _load_split(root, split):
    try:
        return databench.read_split(Path(root), split)
    except (OSError, ValueError) as exc:
        raise _runtime_error(exc) from exc


def _maybe_val_records(root):
    try:
        return databench.read_split(Path(root), "target_val")
    except (OSError, ValueError):
        return None


def _prepare_priors(cfg, params, bn, target_records, priors_path, out_dir):
    if not cfg.source_only:
        if priors_path and Path(priors_path).exists():
            return sampler.load_priors(priors_path), priors_path
        state = sampler.precompute_priors(
            lambda img: trainer.predict_eval(params, bn, img),
            [rec.image for rec in target_records],
            uniform=not cfg.importance_sampling_enabled)
        path = priors_path or str(Path(out_dir) / "priors.bin")
        sampler.save_priors(path, state)
        return state, path
    return None, None


def create_app() -> FastAPI:
    app = FastAPI(title="segadapt", version="0.1.0")

    @app.get("/health")
    def health():
        return {"status": "ok"}

    @app.get("/ablations", response_model=list[AblationInfo])
    def ablations():
        return [AblationInfo(flag=f"ablation.{name}", description=desc)
                for name, desc in ABLATIONS]

    @app.post("/datasets", response_model=GenDataResponse)
    def gen_data(req: GenDataRequest):
        if min(req.count_source, req.count_target, req.count_target_val) < 1:
            raise HTTPException(status_code=400, detail="split counts must be >= 1")
        try:
            manifest = databench.write_benchmark(
                Path(req.out_dir), req.count_source, req.count_target,
                req.count_target_val, req.height, req.width, req.seed)
        except (OSError, ValueError) as exc:
            raise _runtime_error(exc) from exc
        return GenDataResponse(manifest=str(manifest), count_source=req.count_source,
                               count_target=req.count_target,
                               count_target_val=req.count_target_val)

    @app.post("/runs/pretrain", response_model=PretrainResponse)
    def pretrain(req: PretrainRequest):
        cfg = _parse_config(req)
        source = _load_split(req.data_root, "source")
        target = _load_split(req.data_root, "target")
        Path(req.out_dir).mkdir(parents=True, exist_ok=True)
        try:
            result = trainer.pretrain_abn(cfg, source, target, out_dir=req.out_dir)
        except (trainer.DivergenceError, OSError) as exc:
            raise _runtime_error(exc) from exc
        final = result.metrics_rows[-1][1] if result.metrics_rows else None
        return PretrainResponse(checkpoint=result.checkpoint_path,
                                metrics_csv=str(Path(req.out_dir) / "pretrain_metrics.csv"),
                                iterations=cfg.pretrain_iters, final_source_loss=final)

    @app.post("/runs/adapt", response_model=AdaptResponse)
    def adapt(req: AdaptRequest):
        cfg = _parse_config(req)
        source = _load_split(req.data_root, "source")
        target = _load_split(req.data_root, "target")
        val_records = _maybe_val_records(req.data_root)
        Path(req.out_dir).mkdir(parents=True, exist_ok=True)
        try:
            ckpt = load_checkpoint(req.pretrain_checkpoint)
        except (OSError, ValueError) as exc:
            raise _runtime_error(exc) from exc
        try:
            state, priors_path = _prepare_priors(cfg, ckpt.params, ckpt.bn, target,
                                                 req.priors_path, req.out_dir)
            result = trainer.adapt(cfg, ckpt.params, ckpt.bn, source, target, state,
                                   out_dir=req.out_dir, val_records=val_records)
        except (trainer.DivergenceError, OSError, ValueError) as exc:
            raise _runtime_error(exc) from exc
        return AdaptResponse(checkpoint_phi=result.checkpoint_phi,
                             checkpoint_psi=result.checkpoint_psi,
                             metrics_csv=str(Path(req.out_dir) / "adapt_metrics.csv"),
                             history_csv=str(Path(req.out_dir) / "adapt_history.csv"),
                             priors_path=priors_path, final_miou=result.final_miou)

    @app.post("/eval", response_model=EvalResponse)
    def eval_run(req: EvalRequest):
        try:
            ckpt = load_checkpoint(req.checkpoint)
        except (OSError, ValueError) as exc:
            raise _runtime_error(exc) from exc
        records = _load_split(req.data_root, req.split)
        iou, miou = trainer.evaluate(ckpt.params, ckpt.bn, records)
        names = _class_names(ckpt.num_classes)
        csv_path = None
        if req.out_csv:
            row = [None if np.isnan(v) else float(v) for v in iou] + [miou]
            trainer.write_csv(req.out_csv, names + ["miou"], [tuple(row)])
            csv_path = req.out_csv
        return EvalResponse(class_names=names,
                            iou=[None if np.isnan(v) else float(v) for v in iou],
                            miou=miou, csv_path=csv_path)

    @app.post("/inspect", response_model=InspectResponse)
    def inspect(req: InspectRequest):
        cfg = _parse_config(req)
        out_dir = Path(req.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        chis = np.linspace(0.0, 0.05, 501)
        state = ClassPriorState(chi=chis, gamma_chi=cfg.gamma_chi, beta=cfg.beta,
                                zeta=cfg.zeta,
                                class_thresholding=cfg.class_thresholding_enabled)
        theta = thresholds(state, np.ones_like(chis))
        rows = list(zip(chis.tolist(), theta.tolist()))
        curve_csv = out_dir / "threshold_curve.csv"
        trainer.write_csv(curve_csv, ["chi", "theta"], rows)
        state.chi = np.array([0.02])
        theta_at = float(thresholds(state, np.ones(1))[0])

        dumps: list[str] = []
        if req.checkpoint and req.image:
            try:
                ckpt = load_checkpoint(req.checkpoint)
                img = read_ppm(req.image)
            except (OSError, ValueError) as exc:
                raise _runtime_error(exc) from exc
            stream = RngStream(cfg.seed, ("inspect",))
            tb = build_target_batch(img, cfg.crops_per_image, cfg.min_crop_scale,
                                    cfg.input_h, cfg.input_w, stream,
                                    photometric=False, allow_flip=cfg.flipping_enabled)
            preds, specs = momentum_predictions(ckpt.params, ckpt.bn, tb, True)
            fused = fuse(preds, specs, img.shape[-2], img.shape[-1],
                         mode=cfg.effective_fusion_mode)
            for c in range(cfg.num_classes):
                path = out_dir / f"fused_class_{c}.pgm"
                write_pgm(path, np.floor(fused.map[c] * 255.0 + 0.5).astype(np.int64))
                dumps.append(str(path))
        return InspectResponse(curve_csv=str(curve_csv), theta_at_002=theta_at, dumps=dumps)

    @app.post("/runs/sweep", response_model=SweepResponse)
    def sweep(req: SweepRequest):
        cfg = _parse_config(req)
        source = _load_split(req.data_root, "source")
        target = _load_split(req.data_root, "target")
        val_records = _load_split(req.data_root, "target_val")
        out_dir = Path(req.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        try:
            ckpt = load_checkpoint(req.pretrain_checkpoint)
        except (OSError, ValueError) as exc:
            raise _runtime_error(exc) from exc
        try:
            state, _ = _prepare_priors(cfg, ckpt.params, ckpt.bn, target, None, out_dir)
            table = []
            for zeta in SWEEP_ZETAS:
                row = []
                for beta in SWEEP_BETAS:
                    cell_cfg = cfg.apply_overrides({"zeta": repr(zeta), "beta": repr(beta)})
                    cell_dir = out_dir / f"zeta={zeta}_beta={beta}"
                    cell_dir.mkdir(parents=True, exist_ok=True)
                    result = trainer.adapt(cell_cfg, ckpt.params, ckpt.bn, source, target,
                                           state, out_dir=cell_dir, val_records=None)
                    _, miou = trainer.evaluate(result.state.phi, result.state.bn_phi,
                                               val_records)
                    row.append(miou)
                table.append(row)
        except (trainer.DivergenceError, OSError, ValueError, ConfigError) as exc:
            raise _runtime_error(exc) from exc
        csv_path = out_dir / "sweep_miou.csv"
        header = ["zeta\\beta"] + [repr(b) for b in SWEEP_BETAS]
        rows = [(repr(z), *row) for z, row in zip(SWEEP_ZETAS, table)]
        trainer.write_csv(csv_path, header, rows)
        return SweepResponse(zeta_values=SWEEP_ZETAS, beta_values=SWEEP_BETAS,
                             miou=table, csv_path=str(csv_path))

    return app


app = create_app()
