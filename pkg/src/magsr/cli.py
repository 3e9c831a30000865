"""Command-line entry point: ``magsr {gen,train,recon,eval,pose,encode-stream,stream}``."""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import dump_kv, load_kv, write_manifest

METHOD_ROWS = (
    ("Bilinear", "bilinear"),
    ("Bicubic", "bicubic"),
    ("CVAE (z-axis)", "zaxis"),
    ("CVAE (single object)", "single"),
    ("CVAE (3-axis)", "cvae"),
)


class CLIError(Exception):
    pass


def _shapes(text):
    return [s for s in text.split(",") if s]


def _kv_pairs(pairs):
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise CLIError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _settings(args):
    """Config file values overridden by ``--set`` pairs."""
    base = load_kv(args.config) if getattr(args, "config", None) else {}
    base.update(_kv_pairs(getattr(args, "set", None)))
    return base


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _skin(args, settings):
    from .simkit import SkinConfig

    d = dict(settings)
    if getattr(args, "image_size", None):
        d["image_size"] = args.image_size
    return SkinConfig.from_dict(d)


def _load_split(path, split, split_seed):
    from .ingest import read_dataset, split_indices

    records = read_dataset(path)
    if split == "all":
        return records
    tr, te = split_indices(len(records), split_seed)
    idx = tr if split == "train" else te
    return [records[i] for i in idx]


# -- subcommands ---------------------------------------------------------------


def cmd_gen(args):
    from .simkit import generate_dataset

    settings = _settings(args)
    cfg = _skin(args, settings)
    out = _out_dir(args)
    path = out / args.name
    records = generate_dataset(_shapes(args.shapes), args.n, cfg, args.seed, path=path)
    write_manifest(out, "gen", {"shapes": args.shapes, "n": args.n, "seed": args.seed, "name": args.name,
                                **{f"skin.{k}": v for k, v in cfg.to_dict().items()}})
    print(f"wrote {len(records)} records to {path}")


def cmd_train(args):
    import torch

    from .ingest import stack_records
    from .model import CVAEConfig, build_model, save_checkpoint, train

    settings = _settings(args)
    records = _load_split(args.data, "train", args.split_seed)
    if args.shapes:
        keep = set(_shapes(args.shapes))
        records = [r for r in records if r.meta.shape_id in keep]
    if not records:
        raise CLIError("no training records after split/shape filtering")
    mags, depths = stack_records(records)
    kw = {k[len("model."):]: v for k, v in settings.items() if k.startswith("model.")}
    for flag, key in (("latent_dim", "latent_dim"), ("epochs", "epochs"), ("lr", "lr"),
                      ("batch_size", "batch_size"), ("beta", "beta")):
        if getattr(args, flag) is not None:
            kw[key] = getattr(args, flag)
    kw.update(image_size=depths.shape[-1], seed=args.seed, zaxis_only=args.zaxis_only)
    cfg = CVAEConfig.from_dict(kw)
    if args.threads:
        torch.set_num_threads(args.threads)
    out = _out_dir(args)
    model = build_model(cfg)
    save_checkpoint(model, out / "init.smck")
    hist_path = out / "loss_history.csv"
    lines = ["epoch,nll,kl,total"]

    def log(epoch, rec):
        lines.append(f"{epoch},{rec.nll!r},{rec.kl!r},{rec.total!r}")
        if not args.quiet:
            print(f"epoch {epoch:4d}  nll {rec.nll:12.3f}  kl {rec.kl:10.3f}  total {rec.total:12.3f}", flush=True)

    train(model, mags, depths, cfg, log=log)
    hist_path.write_text("\n".join(lines) + "\n")
    save_checkpoint(model, out / "model.smck")
    write_manifest(out, "train", {"data": args.data, "shapes": args.shapes, "split_seed": args.split_seed,
                                  "n_train": len(records),
                                  **{f"model.{k}": v for k, v in cfg.to_dict().items()}})
    print(f"wrote {out / 'model.smck'}")


def write_pgm(path, img):
    """Binary 16-bit PGM of an image in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    data = np.round(np.clip(img, 0.0, 1.0) * 65535).astype(">u2")
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode() + data.tobytes())


def read_pgm(path):
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=">u2").reshape(h, w) / 65535.0


def _predict(method, mags, size, model_path=None, mode="deterministic", seed=0):
    from .baseline import reconstruct_baseline

    if method in ("bilinear", "bicubic"):
        return np.stack([reconstruct_baseline(m, size, method) for m in mags])
    if method == "cvae":
        from .model import load_checkpoint, reconstruct

        if model_path is None:
            raise CLIError("--model is required for method cvae")
        model = load_checkpoint(model_path)
        return reconstruct(model, mags, mode=mode, seed=seed)
    raise CLIError(f"unknown method {method!r}")


def cmd_recon(args):
    from .ingest import stack_records

    records = _load_split(args.data, args.split, args.split_seed)
    if args.limit:
        records = records[: args.limit]
    if not records:
        raise CLIError("no records to reconstruct")
    mags, depths = stack_records(records)
    preds = _predict(args.method, mags, depths.shape[-1], args.model, args.mode, args.seed)
    out = _out_dir(args)
    for i, (p, t) in enumerate(zip(preds, depths)):
        write_pgm(out / f"{i:04d}_{args.method}.pgm", p)
        write_pgm(out / f"{i:04d}_gt.pgm", t)
        write_pgm(out / f"{i:04d}_pair.pgm", np.concatenate([t, p], axis=1))
    write_manifest(out, "recon", {"data": args.data, "method": args.method, "model": args.model,
                                  "split": args.split, "split_seed": args.split_seed, "mode": args.mode,
                                  "seed": args.seed, "limit": args.limit})
    print(f"wrote {len(preds)} reconstructions to {out}")


def cmd_eval(args):
    from .ingest import stack_records
    from .metrics import TABLE_HEADER, evaluate

    records = _load_split(args.data, "test", args.split_seed)
    mags, depths = stack_records(records)
    size = depths.shape[-1]
    models = {"cvae": args.model, "zaxis": args.zaxis_model, "single": args.single_model}
    reports = []
    for label, key in METHOD_ROWS:
        if key in ("bilinear", "bicubic"):
            preds = _predict(key, mags, size)
        elif models[key]:
            preds = _predict("cvae", mags, size, models[key])
        else:
            continue
        reports.append(evaluate(label, preds, depths))
    out = _out_dir(args)
    table = "\n".join([TABLE_HEADER] + [r.row() for r in reports])
    (out / "table.txt").write_text(table + "\n")
    lines = []
    for r in reports:
        key = r.method.lower().replace(" ", "_").replace("(", "").replace(")", "").replace("-", "")
        for k, v in r.to_dict().items():
            if k != "method":
                lines.append(f"{key}.{k}={v!r}")
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    write_manifest(out, "eval", {"data": args.data, "split_seed": args.split_seed, "model": args.model,
                                 "zaxis_model": args.zaxis_model, "single_model": args.single_model})
    print(table)


def parse_trials(text):
    """Lines of ``shape,theta[,tx,ty,press_depth]``."""
    from .simkit import ContactScene, get_shape

    scenes = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        f = [p.strip() for p in line.split(",")]
        vals = [float(v) for v in f[1:]] + [0.0, 0.0, 2.0][len(f) - 2:]
        theta, tx, ty, press = vals[:4]
        scenes.append(ContactScene(get_shape(f[0]), tx, ty, theta, press))
    return scenes


def default_trials(angles=(-60.0, -20.0, 25.0, 70.0), press=2.0):
    from .simkit import ROD_SHAPES

    return "\n".join(f"{s},{a},0,0,{press}" for s in ROD_SHAPES for a in angles)


def run_pose(scenes, cfg, model=None, tolerance=5.0, noise_seed=0):
    """Pose trials for the bilinear baseline path and, if ``model`` is given, the CVAE path."""
    from .model import reconstruct
    from .pose import baseline_pose_path, evaluate_reorientation, image_pose_path
    from .simkit import rasterize_depth, simulate_mag

    cache = {}

    def reading(scene):
        key = id(scene)
        if key not in cache:
            seed = noise_seed + len(cache)
            cache[key] = simulate_mag(rasterize_depth(scene, cfg), cfg, noise_seed=seed)
        return cache[key]

    estimators = {"bilinear": lambda sc: baseline_pose_path(reading(sc))}
    methods = ["bilinear"]
    if model is not None:
        estimators["cvae"] = lambda sc: image_pose_path(reconstruct(model, reading(sc)))
        methods.insert(0, "cvae")
    trials = [(sc, m) for m in methods for sc in scenes]
    return evaluate_reorientation(trials, estimators, tolerance)


def cmd_pose(args):
    from .model import load_checkpoint

    settings = _settings(args)
    text = Path(args.trials).read_text() if args.trials else default_trials()
    scenes = parse_trials(text)
    model = load_checkpoint(args.model) if args.model else None
    cfg = _skin(args, settings)
    if model is not None and cfg.image_size != model.cfg.image_size:
        cfg = _skin(args, {**settings, "image_size": model.cfg.image_size})
    table = run_pose(scenes, cfg, model, args.tolerance_deg, args.seed)
    out = _out_dir(args)
    rows = ["object,true_deg,method,estimate_deg,success,error"]
    for t in table.trials:
        rows.append(f"{t.object_id},{t.true_angle:.3f},{t.method},{t.estimate:.3f},{int(t.success)},{t.error}")
    (out / "trials.csv").write_text("\n".join(rows) + "\n")
    (out / "success.txt").write_text(table.format() + "\n")
    write_manifest(out, "pose", {"model": args.model, "trials": args.trials, "tolerance_deg": args.tolerance_deg,
                                 "seed": args.seed, **{f"skin.{k}": v for k, v in cfg.to_dict().items()}})
    print(table.format())


def cmd_encode_stream(args):
    from .ingest import encode_frame, read_dataset

    records = read_dataset(args.data)
    payload = b"".join(encode_frame(r.mag_raw, i) for i, r in enumerate(records))
    Path(args.output).write_bytes(payload)
    print(f"wrote {len(records)} frames ({len(payload)} bytes) to {args.output}")


def cmd_stream(args):
    from .ingest import StreamDecoder

    data = sys.stdin.buffer.read() if args.input == "-" else Path(args.input).read_bytes()
    dec = StreamDecoder()
    frames = []
    for i in range(0, len(data), args.chunk):
        frames.extend(dec.feed(data[i : i + args.chunk]))
    dec.close()
    out = _out_dir(args)
    rows = ["seq," + ",".join(f"t{i}{j}_{a}" for i in range(4) for j in range(4) for a in "xyz")]
    rows += [f"{seq}," + ",".join(repr(float(v)) for v in r.ravel()) for seq, r in frames]
    (out / "readings.csv").write_text("\n".join(rows) + "\n")
    summary = {"frames": dec.stats.frames, "crc_errors": dec.stats.crc_errors,
               "skipped_bytes": dec.stats.skipped_bytes}
    if args.model and frames:
        import torch

        from .model import load_checkpoint, reconstruct

        torch.set_num_threads(1)
        model = load_checkpoint(args.model)
        reconstruct(model, frames[0][1])  # warm-up
        lat = []
        for _, r in frames[: args.max_recon]:
            t0 = time.perf_counter()
            reconstruct(model, r)
            lat.append((time.perf_counter() - t0) * 1e3)
        lat = np.asarray(lat)
        summary.update(latency_ms_mean=float(lat.mean()), latency_ms_p50=float(np.median(lat)),
                       latency_ms_max=float(lat.max()), latency_n=len(lat))
    (out / "stream_report.txt").write_text(dump_kv(summary))
    write_manifest(out, "stream", {"input": args.input, "model": args.model, "chunk": args.chunk})
    for k, v in summary.items():
        print(f"{k}={v}")


# -- parser --------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="magsr", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp, out=True):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        if out:
            sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("gen", help="generate a synthetic dataset")
    common(sp)
    sp.add_argument("--shapes", default="allen_key,letter_r")
    sp.add_argument("--n", type=int, default=256, help="records per shape")
    sp.add_argument("--image-size", type=int)
    sp.add_argument("--name", default="dataset.smag")
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train", help="train the CVAE on the train split")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--shapes", help="train only on these shape ids")
    sp.add_argument("--zaxis-only", action="store_true")
    sp.add_argument("--latent-dim", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--beta", type=float)
    sp.add_argument("--split-seed", type=int, default=0)
    sp.add_argument("--threads", type=int, default=0)
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("recon", help="write reconstructions next to ground truth (PGM)")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--method", choices=("cvae", "bilinear", "bicubic"), default="cvae")
    sp.add_argument("--model")
    sp.add_argument("--mode", choices=("deterministic", "stochastic"), default="deterministic")
    sp.add_argument("--split", choices=("train", "test", "all"), default="test")
    sp.add_argument("--split-seed", type=int, default=0)
    sp.add_argument("--limit", type=int, default=0)
    sp.set_defaults(func=cmd_recon)

    sp = sub.add_parser("eval", help="metric table over the test split")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--model", help="3-axis CVAE checkpoint")
    sp.add_argument("--zaxis-model")
    sp.add_argument("--single-model", help="CVAE trained on a single object")
    sp.add_argument("--split-seed", type=int, default=0)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("pose", help="in-hand angle estimation trials")
    common(sp)
    sp.add_argument("--model", help="CVAE checkpoint; omit to run the baseline only")
    sp.add_argument("--trials", help="file with lines shape,theta[,tx,ty,press_depth]")
    sp.add_argument("--tolerance-deg", type=float, default=5.0)
    sp.add_argument("--image-size", type=int)
    sp.set_defaults(func=cmd_pose)

    sp = sub.add_parser("encode-stream", help="encode dataset readings as wire frames")
    sp.add_argument("--data", required=True)
    sp.add_argument("--output", required=True)
    sp.set_defaults(func=cmd_encode_stream)

    sp = sub.add_parser("stream", help="decode a wire-frame byte stream")
    common(sp)
    sp.add_argument("--input", required=True, help="file path or - for stdin")
    sp.add_argument("--model", help="time single-reading reconstruction with this checkpoint")
    sp.add_argument("--chunk", type=int, default=4096)
    sp.add_argument("--max-recon", type=int, default=200)
    sp.set_defaults(func=cmd_stream)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (CLIError, ValueError, OSError) as e:
        print(f"magsr {args.cmd}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
