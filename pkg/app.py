"""
Command-line entry point for the IPU toolkit.

    python app.py <subcommand> --out DIR [options]

Every artifact is written inside --out, together with run.json echoing the
resolved arguments and config. Exit codes: 0 success, 1 invalid input,
2 I/O or decode failure, 3 non-finite numerics.
"""

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional

import numpy as np

from config import configure_logging, get_log_level, get_thread_count, load_recipe_config
from utils.calculations import (
    decode_image,
    empirical_joint_independence,
    empirical_output_stats,
    encode_corpus,
    feature_maps,
    knn_hamming,
    label_grid,
    occupancy_stats,
    output_state_distribution,
    probe_response,
    similar_patches,
)
from utils.data_processing import load_corpus, natural_pixel_pairs, random_patches
from utils.errors import IpuError, NumericError, ValidationError
from utils.image_processing import PROBE_KINDS, gen_probe, load_image, save_image, to_gray
from utils.information import (
    OBJECTIVES,
    best_contiguous_partition,
    boundaries_of,
    entropy,
    hq_grouped,
    kl_p_q,
    push_forward,
    toy_distribution,
    toy_example,
    transmission_rate,
)
from utils.losses import OodLossConfig, RepelLossConfig, e_miod, e_ood, repel
from utils.mlp import finite_difference_error, gradient_check, init, make_rng
from utils.storage import (
    load_code_set,
    load_weights,
    read_distribution_csv,
    save_code_set,
    write_json,
    write_table,
    write_values_csv,
)
from utils.training import train
from utils.visualizations import (
    create_activation_table,
    create_active_count_table,
    create_code_proportion_table,
    create_cumulative_occupancy_table,
    create_feature_map_images,
    create_histogram_table,
    create_label_grid_table,
    create_loss_table,
    create_occupancy_table,
    create_patch_table,
    create_probe_table,
    create_state_table,
    create_toy_curve_table,
)

logger = logging.getLogger("ipu")

GRADCHECK_TOLERANCE = 1e-3


def _emit(record):
    print(json.dumps(record, indent=2, sort_keys=True))


def _patch_channels(models, patch_size: int) -> int:
    channels, rest = divmod(models[0].input_dim, patch_size * patch_size)
    if rest or channels not in (1, 3):
        raise ValidationError(f"model input {models[0].input_dim} does not match {patch_size}-pixel patches")
    return channels


def _evaluation_samples(args, models) -> np.ndarray:
    """Held-out pixel pairs for two-pixel models, random patches otherwise"""
    images = load_corpus(args.corpus) if args.corpus else None
    if models[0].input_dim == 2:
        return natural_pixel_pairs(images, args.count, args.seed)
    if images is None:
        raise ValidationError("patch models need --corpus")
    channels = _patch_channels(models, args.patch_size)
    return random_patches(images, args.count, args.seed, args.patch_size, channels).values


def cmd_oracle(args, out: Path) -> dict:
    """Toy example optima and curve; optional best partitions of a distribution CSV"""
    result = toy_example(args.toy_M, args.curve_points)
    dp = best_contiguous_partition(toy_distribution(args.toy_M), 2, "min_Hq", method="dp")
    write_table(create_toy_curve_table(result), out / "toy_curve.csv")
    record = {
        "M": result.M,
        "a_transmission": result.a_transmission,
        "a_modeling": result.a_modeling,
        "a_modeling_ratio": result.a_modeling / result.M,
        "a_dp": boundaries_of(dp)[0],
    }
    if args.dist:
        p = read_distribution_csv(args.dist, normalize=args.normalize)
        record["H_p"] = entropy(p)
        for objective in OBJECTIVES:
            f = best_contiguous_partition(p, args.groups, objective)
            write_values_csv(f.assignment, out / f"partition_{objective}.csv")
            rate = transmission_rate(p, f)
            record[objective] = {
                "boundaries": list(boundaries_of(f)),
                "H_Q": entropy(push_forward(p, f)),
                "H_q": hq_grouped(push_forward(p, f), f),
                "kl_p_q": kl_p_q(p, f),
                "mutual_information": rate.direct,
            }
    print(f"a_transmission={record['a_transmission']} a_modeling/M={record['a_modeling_ratio']:.4f} "
          f"a_dp={record['a_dp']}")
    write_json(record, out / "oracle.json")
    return {}


def cmd_train(args, out: Path) -> dict:
    cfg = load_recipe_config(args.config, args.set or [])
    report = train(cfg, out, args.threads)
    write_json(report.to_dict(), out / "report.json")
    write_table(create_loss_table(report), out / "losses.csv")
    print(f"weights_hash={report.weights_hash}")
    return {"config": cfg.to_dict(), "seed": cfg.seed}


def cmd_stats(args, out: Path) -> dict:
    models = load_weights(args.weights)
    samples = _evaluation_samples(args, models)
    summary = {"samples": int(len(samples))}
    if models[0].head == "softmax":
        for index, model in enumerate(models):
            report = output_state_distribution(model, samples)
            write_table(create_state_table(report), out / f"states_{index:03d}.csv")
            summary[f"dim_{index}"] = {"entropy": report.entropy, "min_mass": report.min_mass,
                                       "max_mass": report.max_mass}
        if len(models) == 2:
            independence = empirical_joint_independence(models, samples)
            summary["tv_distance"] = independence.tv_distance
            summary["marginal_dev"] = independence.marginal_dev
            summary["mutual_information"] = independence.mutual_information
    else:
        stats = empirical_output_stats(models, samples, args.threads)
        write_table(create_histogram_table(stats), out / "histogram.csv")
        write_table(create_activation_table(stats), out / "activation.csv")
        write_table(create_code_proportion_table(stats), out / "code_proportions.csv")
        write_table(create_active_count_table(stats), out / "active_counts.csv")
        summary.update(mean_active=stats.mean_active, near_binary_fraction=stats.near_binary_fraction)
    write_json(summary, out / "stats.json")
    _emit(summary)
    return {"seed": args.seed}


def cmd_grid(args, out: Path) -> dict:
    grid = label_grid(load_weights(args.weights), args.resolution)
    write_table(create_label_grid_table(grid), out / "label_grid.csv")
    print(f"distinct_labels={[int(np.unique(grid.labels[:, :, d]).size) for d in range(grid.labels.shape[2])]}")
    return {}


def cmd_encode(args, out: Path) -> dict:
    if not args.corpus:
        raise ValidationError("encode needs --corpus")
    models = load_weights(args.weights)
    images = load_corpus(args.corpus)
    patches = random_patches(images, args.count, args.seed, args.patch_size, _patch_channels(models, args.patch_size))
    codes, patch_codes = encode_corpus(models, patches.values, args.threads)
    save_code_set(codes, out / "codes.ipuc")
    np.save(out / "patch_codes.npy", patch_codes)
    write_table(create_patch_table(patches), out / "patches.csv")
    print(f"distinct_codes={len(codes.counts)} total={codes.total}")
    return {"seed": args.seed}


def _load_patch_codes(path) -> np.ndarray:
    try:
        return np.load(path)
    except ValueError as e:
        raise ValidationError(f"{path}: not a patch code array ({e})") from e


def cmd_search(args, out: Path) -> dict:
    if args.patch_codes:
        ranked = similar_patches(_load_patch_codes(args.patch_codes), args.query_index, args.k)
    else:
        codes = load_code_set(args.codes).codes
        if not 0 <= args.query_index < len(codes):
            raise ValidationError(f"query index {args.query_index} outside 0..{len(codes) - 1}")
        ranked = knn_hamming(codes, codes[args.query_index], args.k)
    result = [[index, distance] for index, distance in ranked]
    write_json({"query_index": args.query_index, "neighbours": result}, out / "knn.json")
    _emit(result)
    return {}


def cmd_featmap(args, out: Path) -> dict:
    maps = feature_maps(load_weights(args.weights), load_image(args.image), args.patch_size, args.threads)
    for node, image in enumerate(create_feature_map_images(maps)):
        save_image(image, out / f"featmap_{node:03d}.pgm")
    print(f"maps={maps.maps.shape[0]} size={maps.maps.shape[2]}x{maps.maps.shape[1]}")
    return {}


def cmd_probe(args, out: Path) -> dict:
    probe = gen_probe(args.kind, args.width, args.height)
    save_image(probe, out / f"probe_{args.kind}.ppm")
    response = probe_response(load_weights(args.weights), probe, args.patch_size, args.threads)
    write_table(create_probe_table(response), out / "probe.csv")
    summary = response.summary()
    write_json(summary, out / "probe.json")
    _emit(summary)
    return {}


def cmd_occupancy(args, out: Path) -> dict:
    curves = occupancy_stats(load_code_set(args.codes), args.anchors, args.seed)
    write_table(create_occupancy_table(curves), out / "occupancy.csv")
    write_table(create_cumulative_occupancy_table(curves), out / "occupancy_cumulative.csv")
    return {"seed": args.seed}


def cmd_decode(args, out: Path) -> dict:
    encoders = load_weights(args.encoder)
    decoder = load_weights(args.decoder)
    if len(decoder) != 1:
        raise ValidationError("--decoder must name exactly one model")
    image = load_image(args.image)
    decoded = decode_image(encoders, decoder[0], image, args.patch_size, args.threads)
    suffix = "pgm" if decoded.channels == 1 else "ppm"
    save_image(decoded, out / f"decoded.{suffix}")
    reference = image.data if decoded.channels == image.channels else to_gray(image).data
    mse = float(np.mean((decoded.data.astype(np.float64) - reference) ** 2))
    write_json({"mse": mse}, out / "decode.json")
    print(f"mse={mse:.4f}")
    return {}


def _loss_gradcheck(name: str, rng, h: float) -> float:
    S = 8
    if name in ("ood", "miod"):
        dims = 1 if name == "ood" else 3
        logits = [rng.standard_normal((S, 5)) for _ in range(dims)]
        batch = [np.exp(z) / np.exp(z).sum(axis=1, keepdims=True) for z in logits]
        if name == "ood":
            _, grad = e_ood(batch[0], OodLossConfig())
            return finite_difference_error(lambda y: e_ood(y, OodLossConfig(), validate=False)[0],
                                           batch[0], grad, h)
        _, grads = e_miod(batch, OodLossConfig())
        worst = 0.0
        for d in range(dims):
            def at(y, d=d):
                trial = list(batch)
                trial[d] = y
                return e_miod(trial, OodLossConfig(), validate=False)[0]
            worst = max(worst, finite_difference_error(at, batch[d], grads[d], h))
        return worst
    cfg = RepelLossConfig(mode="sample_wise" if name == "repel_sample" else "node_wise")
    batch = rng.uniform(0.1, 0.9, size=(S, 6))
    _, grad = repel(batch, cfg)
    return finite_difference_error(lambda y: repel(y, cfg, validate=False)[0], batch, grad, h)


def cmd_gradcheck(args, out: Path) -> dict:
    """Finite-difference checks of every loss and of an MLP under the ood loss"""
    results = {}
    for name in ("ood", "miod", "repel_sample", "repel_node"):
        results[name] = max(_loss_gradcheck(name, make_rng(args.seed, "gradcheck", name, trial), args.h)
                            for trial in range(args.trials))
    spec = {"layers": [{"in": 2, "out": 16, "act": "sigmoid"}, {"in": 16, "out": 4, "act": "softmax"}]}
    model = init(spec, args.seed)
    batch = make_rng(args.seed, "gradcheck", "model").uniform(size=(32, 2))
    results["mlp"] = gradient_check(model, lambda y: e_ood(y, OodLossConfig(), validate=False),
                                    batch, h=args.h, seed=args.seed)
    write_json(results, out / "gradcheck.json")
    _emit(results)
    failed = [name for name, error in results.items() if not error <= GRADCHECK_TOLERANCE]
    if failed:
        raise NumericError(f"gradient check exceeded {GRADCHECK_TOLERANCE} for {failed}")
    return {"seed": args.seed}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ipu", description="Even-coding IPU toolkit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="output directory; every artifact is written here")
    common.add_argument("--threads", type=int, default=None, help="worker threads (default: IPU_THREADS or all CPUs)")
    common.add_argument("--log-level", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    oracle = sub.add_parser("oracle", parents=[common], help="analytic partition optima")
    oracle.add_argument("--toy-M", dest="toy_M", type=int, default=100_000)
    oracle.add_argument("--curve-points", type=int, default=1001)
    oracle.add_argument("--dist", help="distribution CSV (index,value)")
    oracle.add_argument("--groups", type=int, default=2)
    oracle.add_argument("--normalize", action="store_true")
    oracle.set_defaults(handler=cmd_oracle)

    train_cmd = sub.add_parser("train", parents=[common], help="run a training recipe")
    train_cmd.add_argument("--config", required=True)
    train_cmd.add_argument("--set", action="append", metavar="KEY=VALUE")
    train_cmd.set_defaults(handler=cmd_train)

    def add_sampling(p):
        p.add_argument("--corpus", help="corpus directory or manifest")
        p.add_argument("--count", type=int, default=10_000)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--patch-size", type=int, default=4)

    stats = sub.add_parser("stats", parents=[common], help="output statistics of trained models")
    stats.add_argument("--weights", required=True)
    add_sampling(stats)
    stats.set_defaults(handler=cmd_stats)

    grid = sub.add_parser("grid", parents=[common], help="label grid of two-pixel models")
    grid.add_argument("--weights", required=True)
    grid.add_argument("--resolution", type=int, default=512)
    grid.set_defaults(handler=cmd_grid)

    encode = sub.add_parser("encode", parents=[common], help="binary codes of random corpus patches")
    encode.add_argument("--weights", required=True)
    add_sampling(encode)
    encode.set_defaults(handler=cmd_encode)

    search = sub.add_parser("search", parents=[common], help="Hamming nearest neighbours")
    search.add_argument("--codes", help="IPUC code set")
    search.add_argument("--patch-codes", help="per-patch codes from encode (patch_codes.npy)")
    search.add_argument("--query-index", type=int, required=True)
    search.add_argument("--k", type=int, default=10)
    search.set_defaults(handler=cmd_search)

    featmap = sub.add_parser("featmap", parents=[common], help="stride-1 feature maps")
    featmap.add_argument("--weights", required=True)
    featmap.add_argument("--image", required=True)
    featmap.add_argument("--patch-size", type=int, default=4)
    featmap.set_defaults(handler=cmd_featmap)

    probe = sub.add_parser("probe", parents=[common], help="node responses to a probe image")
    probe.add_argument("--weights", required=True)
    probe.add_argument("--kind", choices=PROBE_KINDS, default="gray_ramp")
    probe.add_argument("--width", type=int, default=512)
    probe.add_argument("--height", type=int, default=16)
    probe.add_argument("--patch-size", type=int, default=5)
    probe.set_defaults(handler=cmd_probe)

    occupancy = sub.add_parser("occupancy", parents=[common], help="code-space occupancy curves")
    occupancy.add_argument("--codes", required=True)
    occupancy.add_argument("--anchors", type=int, default=10)
    occupancy.add_argument("--seed", type=int, default=0)
    occupancy.set_defaults(handler=cmd_occupancy)

    decode = sub.add_parser("decode", parents=[common], help="encode and decode an image tile by tile")
    decode.add_argument("--encoder", required=True)
    decode.add_argument("--decoder", required=True)
    decode.add_argument("--image", required=True)
    decode.add_argument("--patch-size", type=int, default=5)
    decode.set_defaults(handler=cmd_decode)

    gradcheck = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    gradcheck.add_argument("--seed", type=int, default=0)
    gradcheck.add_argument("--trials", type=int, default=20)
    gradcheck.add_argument("--h", type=float, default=1e-5)
    gradcheck.set_defaults(handler=cmd_gradcheck)
    return parser


def _echo(args) -> dict:
    return {key: value for key, value in vars(args).items() if key != "handler"}


def run(argv: Optional[List[str]] = None) -> int:
    """Parse `argv`, run one subcommand and return the process exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code else 0
    try:
        configure_logging(get_log_level(args.log_level))
        args.threads = get_thread_count(args.threads)
        if args.command == "search" and not (args.codes or args.patch_codes):
            raise ValidationError("search needs --codes or --patch-codes")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        extra = args.handler(args, out)
        record = {"command": args.command, "arguments": _echo(args),
                  "created": datetime.now(timezone.utc).isoformat(), **extra}
        write_json(record, out / "run.json")
    except IpuError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
