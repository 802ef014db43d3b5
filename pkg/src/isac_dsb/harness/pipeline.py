"""Stage orchestration: content-addressed run directories, training stages and evaluation sweeps."""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path

import numpy as np
import torch

from .. import dsb as bridge
from ..em.solver import SolverNotConverged
from ..channel_sim import estimate_channel, make_pilots, nmse_ratio
from ..latent_ae import AutoencoderSpec, ChannelAutoencoder, init_from_pca, train_autoencoder
from ..nnet import seed_everything
from ..pointcloud import NormalizationSpec, chamfer_sq, normalize
from ..units import to_db
from .checkpoint import load_checkpoint, save_checkpoint
from .config import config_hash
from .dataset import build_target, generate_dataset, load_dataset, physics_from_config
from .tensorio import atomic_write_bytes, load_tensor, save_tensor

log = logging.getLogger(__name__)

STAGES = ("ae", "fm", "dsb")
REQUIRES = {"ae": "dataset", "fm": "ae", "dsb": "fm"}
METRIC_HEADER = "experiment_id,scenario,sweep,snr_db,x,y,z,metric,value_db,seed"


class StageError(RuntimeError):
    pass


class ImmutableOutputError(RuntimeError):
    pass


# --------------------------------------------------------------------------- layout


def dataset_dir(cfg, seed, out) -> Path:
    return Path(out) / f"dataset-{config_hash(cfg, seed, 'physics+dataset')}"


def run_dir(cfg, seed, out) -> Path:
    return Path(out) / f"run-{config_hash(cfg, seed, 'physics+dataset+ae+fm+dsb')}"


def eval_dir(cfg, seed, out) -> Path:
    return run_dir(cfg, seed, out) / f"eval-{config_hash(cfg, seed, 'eval+pilots')}"


def stage_done(cfg, seed, out, stage) -> bool:
    if stage == "dataset":
        return (dataset_dir(cfg, seed, out) / "manifest.json").exists()
    return (run_dir(cfg, seed, out) / stage / "DONE").exists()


def _require(cfg, seed, out, stage):
    need = REQUIRES[stage]
    if not stage_done(cfg, seed, out, need):
        raise StageError(f"stage {stage!r} needs {need!r} to be completed first")


def _write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def write_immutable(path: Path, text: str) -> None:
    """Write once; a rerun may only reproduce identical bytes."""
    data = text.encode()
    if path.exists():
        if path.read_bytes() != data:
            raise ImmutableOutputError(f"{path} exists with different content")
        return
    atomic_write_bytes(path, data)


def _mark_done(d: Path, meta: dict) -> None:
    _write_text(d / "meta.json", json.dumps(meta, indent=1, sort_keys=True) + "\n")
    _write_text(d / "DONE", "")


def _step_seed(seed: int, stage: str, step: int = 0) -> int:
    tag = sum(ord(c) << (8 * n) for n, c in enumerate(stage))
    return int(np.random.SeedSequence([int(seed), tag, int(step)]).generate_state(1, np.uint32)[0])


# --------------------------------------------------------------------------- dataset


def cmd_gen_dataset(cfg, seed, out, progress=None) -> Path:
    d = dataset_dir(cfg, seed, out)
    if stage_done(cfg, seed, out, "dataset"):
        log.info("dataset already present at %s", d)
        return d
    generate_dataset(cfg, seed, d, progress)
    return d


def _norm(ds) -> NormalizationSpec:
    return NormalizationSpec.from_dict(ds.manifest["normalization"])


def normalized_clouds(ds, idx) -> np.ndarray:
    norm = _norm(ds)
    return np.stack([normalize(ds.clouds[i], norm.at(ds.locations[i])) for i in idx])


# --------------------------------------------------------------------------- models


def ae_spec(cfg, gain: float = 1.0) -> AutoencoderSpec:
    p, a = cfg["physics"], cfg["ae"]
    geo = {}
    if a["geometric"]:
        phys = physics_from_config(cfg)
        geo = dict(tx_pos=phys.tx.positions.tolist(), rx_pos=phys.rx.positions.tolist(),
                   wavenumbers=[float(k) for k in phys.plan.wavenumbers])
    return AutoencoderSpec(
        K=int(p["K"]), n_r=int(p["n_r"]), n_t=int(p["n_t"]), M=int(cfg["dataset"]["M"]),
        d_pos=int(a["d_pos"]), channels=int(a["channels"]), down_blocks=int(a["down_blocks"]),
        skip=bool(a["skip"]), gain=float(gain), **geo,
    )


def fit_gain(spec: AutoencoderSpec, H: np.ndarray, pos: np.ndarray) -> float:
    """Global constant giving compensated training channels unit RMS."""
    unit = ChannelAutoencoder(AutoencoderSpec(**{**spec.to_dict(), "gain": 1.0}))
    c = unit.compensation(pos).numpy()
    return float(1.0 / np.sqrt(np.mean(np.abs(H * c) ** 2)))


def load_autoencoder(cfg, seed, out) -> ChannelAutoencoder:
    d = run_dir(cfg, seed, out) / "ae"
    state, meta = load_checkpoint(d / "model")
    model = ChannelAutoencoder(AutoencoderSpec(**meta["spec"]))
    model.load_state_dict(state["ae"])
    model.eval()
    return model


def _bridge_net(cfg, M: int) -> bridge.BridgeNet:
    f, N = cfg["fm"], int(cfg["dsb"]["N"])
    return bridge.BridgeNet((M, 5), N, hidden=tuple(f["hidden"]), ctx_dim=int(f["ctx_dim"]))


def schedule_from(cfg) -> bridge.GammaSchedule:
    d = cfg["dsb"]
    return bridge.GammaSchedule.linear_updown(int(d["N"]), float(d["gamma_min"]), float(d["gamma_max"]))


def load_standardizer(cfg, seed, out) -> bridge.LatentStandardizer:
    d = run_dir(cfg, seed, out) / "fm"
    dt = torch.get_default_dtype()
    return bridge.LatentStandardizer(
        torch.as_tensor(load_tensor(d / "latent_mean.emt"), dtype=dt), torch.as_tensor(load_tensor(d / "latent_std.emt"), dtype=dt)
    )


def load_bridge(cfg, seed, out, which: str = "final") -> bridge.BridgeNetworks:
    M = int(cfg["dataset"]["M"])
    F, B = _bridge_net(cfg, M), _bridge_net(cfg, M)
    F.scale, B.scale = 1.0 / F.n_steps, -1.0 / B.n_steps
    state, _ = load_checkpoint(run_dir(cfg, seed, out) / "dsb" / which)
    nets = bridge.BridgeNetworks(F, B, schedule_from(cfg))
    nets.load_state(state)
    return nets


def encoded_latents(model, H, pos, batch: int = 256) -> torch.Tensor:
    with torch.no_grad():
        return torch.cat([model.encode(torch.as_tensor(H[a : a + batch]), pos[a : a + batch]) for a in range(0, len(H), batch)])


# --------------------------------------------------------------------------- training stages


def train_ae(cfg, seed, out, progress=None) -> Path:
    _require(cfg, seed, out, "ae")
    d = run_dir(cfg, seed, out) / "ae"
    if stage_done(cfg, seed, out, "ae"):
        return d
    ds = load_dataset(dataset_dir(cfg, seed, out))
    _, pos_tr, H_tr = ds.subset("train")
    _, pos_va, H_va = ds.subset("val")
    a = cfg["ae"]
    spec = ae_spec(cfg)
    spec.gain = fit_gain(spec, H_tr, pos_tr)
    seed_everything(_step_seed(seed, "ae"))
    model = ChannelAutoencoder(spec)
    if a["pca_init"]:
        init_from_pca(model, H_tr, pos_tr)
    hist = train_autoencoder(
        model, H_tr, pos_tr, H_va, pos_va, epochs=int(a["epochs"]), lr=float(a["lr"]), batch_size=int(a["batch_size"]),
        seed=_step_seed(seed, "ae", 1), noise_snr_db=a["noise_snr_db"], lr_decay=float(a["lr_decay"]),
        time_budget_s=a["time_budget_s"], callback=progress,
    )
    lines = ["epoch,train_nmse_db,val_nmse_db"] + [f"{e},{t!r},{v!r}" for e, t, v in hist.rows]
    _write_text(d / "log.csv", "\n".join(lines) + "\n")
    save_checkpoint(d / "model", {"ae": model.state_dict()}, {"spec": spec.to_dict()})
    _mark_done(d, {"epochs_run": len(hist.rows), "final_val_nmse_db": hist.rows[-1][2]})
    return d


def _bridge_data(cfg, seed, out):
    ds = load_dataset(dataset_dir(cfg, seed, out))
    idx = ds.manifest["split"]["train"]
    model = load_autoencoder(cfg, seed, out)
    dt = torch.get_default_dtype()
    X0 = torch.as_tensor(normalized_clouds(ds, idx), dtype=dt)
    Z = encoded_latents(model, ds.channels[idx], ds.locations[idx]).to(dt)
    return ds, model, X0, Z


def train_fm(cfg, seed, out, progress=None) -> Path:
    _require(cfg, seed, out, "fm")
    d = run_dir(cfg, seed, out) / "fm"
    if stage_done(cfg, seed, out, "fm"):
        return d
    _, _, X0, Z = _bridge_data(cfg, seed, out)
    std = bridge.LatentStandardizer.fit(Z)
    XN = std.forward(Z)
    f = cfg["fm"]
    if f["coupling"] == "paired":
        pairs = bridge.paired_sampler(X0, XN)
    elif f["coupling"] == "independent":
        pairs = bridge.independent_sampler(bridge.tensor_sampler(X0), bridge.tensor_sampler(XN))
    else:
        raise StageError(f"unknown coupling {f['coupling']!r}")
    seed_everything(_step_seed(seed, "fm"))
    F = _bridge_net(cfg, X0.shape[1])
    res = bridge.fm_pretrain(
        F, pairs, steps=int(f["steps"]), lr=float(f["lr"]), batch_size=int(f["batch_size"]), seed=_step_seed(seed, "fm", 1),
        callback=progress,
    )
    save_tensor(d / "latent_mean.emt", std.mean.double().numpy())
    save_tensor(d / "latent_std.emt", std.std.double().numpy())
    save_checkpoint(d / "model", {"F": F.state_dict()}, {"scale": F.scale})
    _write_text(d / "loss.csv", "step,loss\n" + "".join(f"{n},{v!r}\n" for n, v in enumerate(res.losses)))
    _mark_done(d, {"final_loss": float(np.mean(res.losses[-100:]))})
    return d


def _val_metrics(cfg, seed, out, ds, model, std):
    """Validation closures: MCD of sensed clouds (backward) and NMSE of reconstructed channels (forward)."""
    n_val = int(cfg["dsb"]["val_targets"])
    idx = ds.manifest["split"]["val"][:n_val]
    truth = normalized_clouds(ds, idx)
    norm = _norm(ds)

    def validate(direction, nets):
        if direction == "backward":
            vals = [
                chamfer_sq(truth[n], bridge.sense(ds.channels[i], ds.locations[i], nets, model, std, norm, seed=n)[0])
                for n, i in enumerate(idx)
            ]
        else:
            vals = [
                nmse_ratio(ds.channels[i], bridge.reconstruct(truth[n], ds.locations[i], nets, model, std, seed=n))
                for n, i in enumerate(idx)
            ]
        return to_db(math.fsum(vals) / len(vals))

    return validate


def train_dsb(cfg, seed, out, progress=None, stop_after: tuple[int, str] | None = None) -> Path:
    """IPF stage; resumes from the newest half-epoch checkpoint. ``stop_after`` interrupts (for tests)."""
    _require(cfg, seed, out, "dsb")
    d = run_dir(cfg, seed, out) / "dsb"
    if stage_done(cfg, seed, out, "dsb"):
        return d
    ds, model, X0, Z = _bridge_data(cfg, seed, out)
    std = load_standardizer(cfg, seed, out)
    XN = std.forward(Z)
    b = cfg["dsb"]
    epochs = int(b["epochs"])
    sched = schedule_from(cfg)
    F = _bridge_net(cfg, X0.shape[1])
    state, meta = load_checkpoint(run_dir(cfg, seed, out) / "fm" / "model")
    F.load_state_dict(state["F"])
    F.scale = float(meta["scale"])
    nets = bridge.BridgeNetworks(F, bridge.backward_from_forward(F), sched)

    hist = bridge.DsbHistory()
    start = (0, "backward")
    latest = d / "latest"
    if (latest / "manifest.json").exists():
        st, meta = load_checkpoint(latest)
        nets.load_state(st)
        hist.rows = [tuple(r) for r in meta["history"]]
        n = meta["epoch"]
        start = (n, "forward") if meta["direction"] == "backward" else (n + 1, "backward")
        log.info("resuming dsb at %s", start)

    def checkpoint(n, direction, nets_):
        save_checkpoint(latest, nets_.state(), {"epoch": n, "direction": direction, "history": [list(r) for r in hist.rows]})
        if progress is not None:
            progress(n, direction, hist.rows[-1])
        if stop_after is not None and (n, direction) == tuple(stop_after):
            raise _Stop()

    if start[0] < epochs:
        try:
            bridge.dsb_train(
                nets, bridge.tensor_sampler(X0), bridge.tensor_sampler(XN), epochs, int(b["steps_per_half"]),
                lr=float(b["lr"]), batch_size=int(b["batch_size"]), seed=_step_seed(seed, "dsb"),
                final_noise=bool(b["final_noise"]), validate=_val_metrics(cfg, seed, out, ds, model, std),
                checkpoint=checkpoint, start=start, history=hist,
            )
        except _Stop:
            return d
    _write_text(d / "history.csv", hist.to_csv())
    save_checkpoint(d / "final", nets.state(), {"schedule": list(sched.gammas)})
    _mark_done(d, {"halves": len(hist.rows)})
    return d


class _Stop(Exception):
    pass


def cmd_train(cfg, seed, out, stage: str, progress=None) -> Path:
    if stage not in STAGES:
        raise StageError(f"unknown stage {stage!r}")
    return {"ae": train_ae, "fm": train_fm, "dsb": train_dsb}[stage](cfg, seed, out, progress)


# --------------------------------------------------------------------------- evaluation


def _fmt(v: float) -> str:
    return format(float(v), ".10g")


def _placed_channel(cfg, seed, out, index: int, location) -> tuple[np.ndarray, np.ndarray] | None:
    """Truth cloud and channel of test target ``index`` moved to ``location`` (cached, deterministic).

    ``None`` when the solver fails there or the channel is null; the failure is cached too.
    """
    cache = dataset_dir(cfg, seed, out) / "placed"
    key = f"{index}-" + "_".join(_fmt(v) for v in location)
    fc, fh, ff = cache / f"{key}-cloud.emt", cache / f"{key}-channel.emt", cache / f"{key}-failed.txt"
    if ff.exists():
        return None
    if fc.exists() and fh.exists():
        return load_tensor(fc, np.float64), load_tensor(fh, np.complex128)
    spec, cloud, mat = build_target(cfg, seed, index, location)
    try:
        H = physics_from_config(cfg).channel(mat, spec.location)
        if not np.any(H):
            raise ValueError("zero channel")
    except (SolverNotConverged, ValueError) as exc:
        log.warning("test target %d at %s skipped: %s", index, location, exc)
        _write_text(ff, f"{exc}\n")
        return None
    save_tensor(fh, H)
    save_tensor(fc, cloud)
    return cloud, H


def sector_grid(cfg) -> list[tuple[float, float, float]]:
    e, d = cfg["eval"], cfg["dataset"]
    pts = []
    for r in e["radii"]:
        for a in e["angles_deg"]:
            if not (d["r_min"] - 1e-9 <= r <= d["r_max"] + 1e-9) or abs(a) > d["max_angle_deg"] + 1e-9:
                raise StageError(f"location grid point (r={r}, angle={a}) lies outside the sector")
            th = math.radians(a)
            pts.append((r * math.cos(th), r * math.sin(th), 0.0))
    return pts


def _sub_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint32)[0])


def evaluate(cfg, seed, out, scenario: str, sweep: str, progress=None) -> str:
    """Metric CSV text for one scenario/sweep; rows are per (location, snr, eval seed)."""
    if scenario not in ("sense", "reconstruct") or sweep not in ("snr", "location"):
        raise StageError(f"unknown evaluation {scenario}/{sweep}")
    if not stage_done(cfg, seed, out, "dsb"):
        raise StageError("evaluation needs a completed 'dsb' stage")
    e, pil = cfg["eval"], cfg["pilots"]
    ds = load_dataset(dataset_dir(cfg, seed, out))
    norm = _norm(ds)
    model = load_autoencoder(cfg, seed, out)
    nets = load_bridge(cfg, seed, out)
    std = load_standardizer(cfg, seed, out)
    pilots = make_pilots(pil["kind"], int(cfg["physics"]["n_t"]), int(pil["I"]), float(pil["power"]))
    targets = ds.manifest["split"]["test"][: int(e["max_targets"])]
    if sweep == "snr":
        points = [tuple(map(float, loc)) for loc in e["locations"]]
        snrs = [float(s) for s in e["snr_db"]]
    else:
        points = sector_grid(cfg)
        snrs = [float(e["location_snr_db"])]
    exp_id = config_hash(cfg, seed)
    metric = "MCD" if scenario == "sense" else "NMSE"
    lines = [METRIC_HEADER]
    for loc in points:
        placed = {t: _placed_channel(cfg, seed, out, t, loc) for t in targets}
        kept = [t for t in targets if placed[t] is not None]
        truth = [normalize(placed[t][0], norm.at(loc)) for t in kept]
        for snr in snrs:
            for es in e["seeds"]:
                vals = []
                for t, cloud_n in zip(kept, truth):
                    H = placed[t][1]
                    # the same noise draws are reused at every SNR point
                    s = _sub_seed(es, t)
                    if scenario == "sense":
                        H_est = estimate_channel(H, pilots, snr, seed=s, per_subcarrier=bool(pil["per_subcarrier_snr"]))
                        est, _ = bridge.sense(H_est, loc, nets, model, std, norm, seed=s,
                                              perturb_start=bool(cfg["dsb"]["perturb_sense_start"]))
                        vals.append(chamfer_sq(cloud_n, est))
                    else:
                        noisy = bridge.add_cloud_noise(cloud_n, snr, np.random.default_rng(s))
                        H_rec = bridge.reconstruct(noisy, loc, nets, model, std, seed=s)
                        vals.append(nmse_ratio(H, H_rec))
                value = to_db(math.fsum(vals) / len(vals)) if vals else math.nan
                lines.append(",".join([exp_id, scenario, sweep, _fmt(snr), *map(_fmt, loc), metric, _fmt(value), str(es)]))
                if progress is not None:
                    progress(lines[-1])
    return "\n".join(lines) + "\n"


def cmd_eval(cfg, seed, out, scenario: str, sweep: str, progress=None) -> Path:
    d = eval_dir(cfg, seed, out)
    text = evaluate(cfg, seed, out, scenario, sweep, progress)
    path = d / f"{scenario}-{sweep}.csv"
    write_immutable(path, text)
    _write_text(d / "config.json", json.dumps(cfg, indent=1, sort_keys=True) + "\n")
    return path


def read_metrics(path) -> list[dict]:
    import csv

    with open(path) as fh:
        return list(csv.DictReader(fh))
