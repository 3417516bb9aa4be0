"""Command-line surface: encode, decode, train, analyze.

Every command validates its inputs up front, logs the seed it runs
under, removes partial outputs on failure, and exits non-zero on any
error. Batch encoding over a directory fans out across a thread pool
capped by the SAMIC_THREADS environment variable.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import codec, coder, ppm, sass
from . import tensor as T
from .metrics import ms_ssim, psnr


def _make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="samic",
        description="Semantic-aware selective-scan image codec")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint_required=True):
        p.add_argument("--checkpoint", required=checkpoint_required,
                       help="checkpoint file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="output path")

    enc = sub.add_parser("encode", help="image (PPM) -> bitstream")
    enc.add_argument("--input", required=True, help="PPM file or directory")
    common(enc)

    dec = sub.add_parser("decode", help="bitstream -> image (PPM)")
    dec.add_argument("--input", required=True, help="bitstream file")
    common(dec)

    tr = sub.add_parser("train", help="fit a model on a PPM directory")
    tr.add_argument("--data", required=True, help="directory of PPM images")
    tr.add_argument("--steps", type=int, default=500)
    tr.add_argument("--preset", choices=("toy", "paper"), default="toy")
    tr.add_argument("--lambda-index", type=int, default=0, choices=range(4))
    tr.add_argument("--clusters", type=int, default=16)
    tr.add_argument("--lr", type=float, default=1e-4)
    tr.add_argument("--batch-size", type=int, default=1)
    tr.add_argument("--no-rrm", action="store_true",
                    help="disable the low-rank redundancy reduction")
    tr.add_argument("--checkpoint", default=None,
                    help="resume from this checkpoint if it exists")
    tr.add_argument("--log-csv", default=None,
                    help="per-step loss log (default: <out>.log.csv)")
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--out", required=True, help="checkpoint output path")

    an = sub.add_parser("analyze", help="diagnostic exports")
    an.add_argument("--input", required=True, help="PPM image")
    an.add_argument("--mode", required=True,
                    choices=("erf", "latcorr", "scantrace"))
    common(an)
    return parser


def main(argv=None) -> int:
    args = _make_parser().parse_args(argv)
    outputs: list[str] = []
    try:
        print(f"seed: {args.seed}")
        handler = {
            "encode": cmd_encode,
            "decode": cmd_decode,
            "train": cmd_train,
            "analyze": cmd_analyze,
        }[args.command]
        handler(args, outputs)
        return 0
    except Exception as exc:                      # noqa: BLE001 - CLI boundary
        for path in outputs:
            if os.path.exists(path):
                os.remove(path)
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _load_model(path: str) -> codec.CodecModel:
    model, _ = codec.load_checkpoint(path)
    return model


def _max_workers() -> int:
    cap = os.environ.get("SAMIC_THREADS")
    if cap is not None:
        return max(1, int(cap))
    return min(4, os.cpu_count() or 1)


def _encode_one(model, image_path, out_path):
    image = ppm.read_ppm(image_path)
    bits, stats = model.encode_image(image)
    with open(out_path, "wb") as f:
        f.write(bits.pack())
    recon = model.decode_image(bits)
    row = {
        "image": os.path.basename(image_path),
        "bpp_estimated": stats["bpp_estimated"],
        "bpp_actual": stats["bpp_actual"],
        "psnr": psnr(image, recon),
        "ms_ssim": ms_ssim(image, recon).item(),
    }
    return row


def cmd_encode(args, outputs) -> None:
    model = _load_model(args.checkpoint)
    if os.path.isdir(args.input):
        names = sorted(n for n in os.listdir(args.input) if n.endswith(".ppm"))
        if not names:
            raise FileNotFoundError(f"no PPM images in {args.input}")
        os.makedirs(args.out, exist_ok=True)
        jobs = []
        with ThreadPoolExecutor(max_workers=_max_workers()) as pool:
            for name in names:
                dst = os.path.join(args.out, name[:-4] + ".samc")
                outputs.append(dst)
                jobs.append(pool.submit(_encode_one, model,
                                        os.path.join(args.input, name), dst))
            rows = [j.result() for j in jobs]
        report = os.path.join(args.out, "metrics.csv")
        outputs.append(report)
        with open(report, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
        for row in rows:
            print("%s bpp_actual=%.4f bpp_estimated=%.4f psnr=%.2f ms_ssim=%.4f"
                  % (row["image"], row["bpp_actual"], row["bpp_estimated"],
                     row["psnr"], row["ms_ssim"]))
        return
    outputs.append(args.out)
    row = _encode_one(model, args.input, args.out)
    print("bpp_actual=%.4f bpp_estimated=%.4f" % (row["bpp_actual"],
                                                  row["bpp_estimated"]))


def cmd_decode(args, outputs) -> None:
    model = _load_model(args.checkpoint)
    with open(args.input, "rb") as f:
        bits = coder.Bitstream.unpack(f.read())
    image = model.decode_image(bits)
    outputs.append(args.out)
    ppm.write_ppm(args.out, image)
    print(f"decoded {bits.width}x{bits.height} image -> {args.out}")


def load_dataset(data_dir: str) -> list[np.ndarray]:
    names = sorted(n for n in os.listdir(data_dir) if n.endswith(".ppm"))
    if not names:
        raise FileNotFoundError(f"no PPM images in {data_dir}")
    return [ppm.read_ppm(os.path.join(data_dir, n)) for n in names]


def run_training(model: codec.CodecModel, images: list[np.ndarray],
                 steps: int, lr: float, batch_size: int, seed: int,
                 start_step: int = 0, log_rows: list | None = None,
                 log_every: int = 1) -> codec.CodecModel:
    """Deterministic training loop shared by the CLI and the test suite."""
    opt = codec.Adam(list(model.named_params()), lr=lr)
    step_rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC0DE)))
    for step in range(start_step, start_step + steps):
        batch = [images[(step * batch_size + i) % len(images)]
                 for i in range(batch_size)]
        parts = codec.train_step(model, batch, opt, step_rng)
        if parts is None:
            print(f"step {step}: non-finite loss, step aborted")
            continue
        if log_rows is not None and step % log_every == 0:
            log_rows.append({"step": step,
                             "loss": repr(parts["loss"]),
                             "rate_bpp": repr(parts["rate_bpp"]),
                             "distortion": repr(parts["distortion"]),
                             "perceptual": repr(parts["perceptual"])})
    return model


def cmd_train(args, outputs) -> None:
    images = load_dataset(args.data)
    start_step = 0
    if args.checkpoint and os.path.exists(args.checkpoint):
        model, start_step = codec.load_checkpoint(args.checkpoint)
        print(f"resumed from {args.checkpoint} at step {start_step}")
    else:
        make = codec.toy_config if args.preset == "toy" else codec.paper_config
        cfg = make(lambda_index=args.lambda_index, clusters=args.clusters,
                   use_rrm=not args.no_rrm)
        model = codec.CodecModel(cfg, np.random.default_rng(args.seed))
    rows: list[dict] = []
    run_training(model, images, args.steps, args.lr, args.batch_size,
                 args.seed, start_step=start_step, log_rows=rows)
    outputs.append(args.out)
    codec.save_checkpoint(args.out, model, start_step + args.steps)
    log_path = args.log_csv or (args.out + ".log.csv")
    outputs.append(log_path)
    with open(log_path, "w", newline="") as f:
        writer = csv.DictWriter(
            f, fieldnames=["step", "loss", "rate_bpp", "distortion", "perceptual"])
        writer.writeheader()
        writer.writerows(rows)
    if rows:
        print(f"trained {args.steps} steps; final loss {rows[-1]['loss']}")


def cmd_analyze(args, outputs) -> None:
    model = _load_model(args.checkpoint)
    image = ppm.read_ppm(args.input)
    outputs.append(args.out)
    if args.mode == "erf":
        heat = codec.receptive_field_heatmap(model, image)
        scaled = np.log1p(heat / max(heat.max(), 1e-300))
        ppm.write_pgm(args.out, scaled / max(scaled.max(), 1e-300))
    elif args.mode == "latcorr":
        cors = codec.latent_correlation(model, image)
        with open(args.out, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["lag", "mean_abs_correlation"])
            for lag, value in enumerate(cors, start=1):
                writer.writerow([lag, repr(value)])
    else:
        x = T.Tensor(codec.pad_image(image))
        with T.no_grad():
            h = codec._down(x, model.ga_convs[0])
            h = codec._down(h, model.ga_convs[1])
            block = model.ga_blocks[0][0]
            _, assign = block.forward_with_assignment(h)
        sass.write_scan_trace(args.out, assign, h.shape[1], h.shape[2])
    print(f"{args.mode} export -> {args.out}")


if __name__ == "__main__":
    sys.exit(main())
