"""Command-line driver: pretrain, train, evaluate, invert, export.

Every command resolves its configuration (defaults, then ``--config`` file,
then flags), echoes it to stdout and writes it to ``<out>/config.txt``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric error.
"""

import argparse
import csv
import logging
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from .data import (
    CIFAR_SHAPE,
    CifarPreprocessor,
    Dataset,
    export_filter_grid,
    load_cifar10,
    load_image_dir,
    preprocess_caltech,
    read_image,
    resize,
    grayscale,
    synthetic_cifar,
    to_display,
    write_pgm,
)
from .exceptions import ConfigError, FormatError, NumericError
from .invert import hallucinate, record_target
from .network import ARCHS, SparseConvNet, _accuracy_loss, get_arch, load_model, parse_protocol, save_model

logger = logging.getLogger("sparsefeat")

DEFAULTS = {
    "data": "synthetic:400",
    "test_data": "",
    "arch": "desk",
    "encoder": "si",
    "protocol": "RR",
    "seed": 0,
    "out": "run",
    "epochs": 10,
    "lr": 0.003,
    "lambda_l1": 0.4,
    "batch_size": 1,
    "n_patches": 2000,
    "conv_region": 16,
    "head_l1": 1e-5,
    "head_l2": 1e-2,
    "dpsd_iter": 1,
    "checkpoint": "",
    "model": "",
    "model_nocn": "",
    "steps": 200,
    "init_original": False,
    "threads": 0,
}

_TYPES = {k: type(v) for k, v in DEFAULTS.items()}


def _parse_bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off", ""):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _coerce(key, value):
    typ = _TYPES[key]
    try:
        if typ is bool:
            return _parse_bool(value)
        return typ(value)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


def read_config_file(path):
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    conf = {}
    try:
        with open(path) as f:
            lines = f.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in DEFAULTS:
            raise ConfigError(f"{path}:{n}: unknown key {key!r}")
        conf[key] = _coerce(key, value)
    return conf


def resolve_config(args):
    conf = dict(DEFAULTS)
    if args.config:
        conf.update(read_config_file(args.config))
    for key in DEFAULTS:
        v = getattr(args, key, None)
        if v is not None:
            conf[key] = _coerce(key, v)
    if conf["arch"] not in ARCHS:
        raise ConfigError(f"unknown arch {conf['arch']!r}; choose from {sorted(ARCHS)}")
    conf["command"] = args.command
    return conf


def echo_config(conf):
    os.makedirs(conf["out"], exist_ok=True)
    text = "".join(f"{k}={conf[k]}\n" for k in sorted(conf))
    sys.stdout.write(text)
    with open(os.path.join(conf["out"], "config.txt"), "w") as f:
        f.write(text)


# -- data ----------------------------------------------------------------------------


def _raw_dataset(spec, split, seed):
    if spec.startswith("synthetic:"):
        try:
            n = int(spec.split(":", 1)[1])
        except ValueError as exc:
            raise ConfigError(f"bad synthetic data spec {spec!r}") from exc
        if split == "test":
            n, seed = max(n // 4, 1), seed + 1
        X, y = synthetic_cifar(n, random_state=seed)
        return Dataset(X, y, ("cross", "ring"), split)
    if os.path.isdir(spec):
        entries = os.listdir(spec)
        if any(e.startswith(("data_batch", "test_batch")) for e in entries):
            return load_cifar10(spec, split)
        return load_image_dir(spec, split=split)
    if os.path.isfile(spec):
        return load_cifar10(spec, split)
    raise FormatError(f"{spec}: no such data file or directory")


def _fit_input(img, shape):
    """Bring one raw image to the architecture's input shape."""
    c, h, w = shape
    if shape == (1, 143, 143):
        return preprocess_caltech(img)
    if img.shape[0] != c:
        img = grayscale(img) if c == 1 else img
    if img.shape[1:] != (h, w):
        img = resize(img, h, w)
    return img


def load_data(conf, input_shape):
    """``(train, test)`` datasets preprocessed for ``input_shape``."""
    seed = conf["seed"]
    train = _raw_dataset(conf["data"], "train", seed)
    test_spec = conf["test_data"] or (conf["data"] if conf["data"].startswith("synthetic:") or os.path.isdir(conf["data"]) else "")
    test = _raw_dataset(test_spec, "test", seed) if test_spec else None
    if tuple(input_shape) == CIFAR_SHAPE and train.X.shape[1:] == CIFAR_SHAPE:
        pre = CifarPreprocessor().fit(train.X)
        train = Dataset(pre.transform(train.X), train.y, train.class_names, "train")
        if test is not None:
            test = Dataset(pre.transform(test.X), test.y, test.class_names, "test")
        return train, test

    def prep(ds):
        if ds is None:
            return None
        return Dataset(np.stack([_fit_input(x, tuple(input_shape)) for x in ds.X]), ds.y, ds.class_names, ds.split)

    return prep(train), prep(test)


def _estimator(conf, init_model=None):
    return SparseConvNet(
        arch=conf["arch"],
        protocol=conf["protocol"],
        encoder=conf["encoder"],
        lambda_l1=conf["lambda_l1"],
        head_l1=conf["head_l1"],
        head_l2=conf["head_l2"],
        lr=conf["lr"],
        epochs=conf["epochs"],
        batch_size=conf["batch_size"],
        n_patches=conf["n_patches"],
        conv_region=conf["conv_region"],
        dpsd_params={"n_iter": conf["dpsd_iter"]},
        init_model=init_model,
        random_state=conf["seed"],
    )


def _export_filters(net, out, prefix):
    paths = []
    for i, s in enumerate(net.stages):
        path = os.path.join(out, f"{prefix}stage{i + 1}_filters.pgm")
        export_filter_grid(s.encoder.bank, path)
        paths.append(path)
    return paths


# -- commands --------------------------------------------------------------------------


def cmd_pretrain(conf):
    input_shape, configs = get_arch(conf["arch"], conf["encoder"])
    protocol = parse_protocol(conf["protocol"], len(configs))
    if all(p.init == "R" for p in protocol):
        raise ConfigError(f"protocol {conf['protocol']!r} has no U or D stage: nothing to pretrain")
    train, _ = load_data(conf, input_shape)
    est = _estimator(conf).pretrain(train.X, train.y)
    path = os.path.join(conf["out"], "checkpoint.bin")
    save_model(path, est.model_, {"protocol": conf["protocol"], "seed": conf["seed"], "arch": conf["arch"]})
    _export_filters(est.model_, conf["out"], "")
    n_kernels = [len(s.table) for s in est.model_.stages]
    print(f"checkpoint {path} kernels per stage {n_kernels}")
    return 0


def cmd_train(conf):
    input_shape, configs = get_arch(conf["arch"], conf["encoder"])
    init = None
    if conf["checkpoint"]:
        init, meta = load_model(conf["checkpoint"])
        if [c.to_dict() for c in init.configs] != [c.to_dict() for c in configs] or init.input_shape != tuple(input_shape):
            raise ConfigError(f"checkpoint {conf['checkpoint']} does not match arch {conf['arch']!r}")
    train, test = load_data(conf, input_shape)
    est = _estimator(conf, init)
    eval_set = (test.X, test.y) if test is not None else None
    est.fit(train.X, train.y, eval_set=eval_set)
    model_path = os.path.join(conf["out"], "model.bin")
    est.save(model_path)
    est.write_metrics(os.path.join(conf["out"], "metrics.csv"))
    if test is not None:
        print(f"test accuracy {est.score(test.X, test.y):.4f}")
    print(f"train accuracy {est.score(train.X, train.y):.4f}")
    return 0


def cmd_evaluate(conf):
    if not conf["model"]:
        raise ConfigError("evaluate needs --model")
    net, meta = load_model(conf["model"])
    test_spec = conf["test_data"] or conf["data"]
    train, _ = load_data({**conf, "test_data": ""}, net.input_shape)
    ds = train
    if test_spec != conf["data"] or conf["data"].startswith("synthetic:"):
        _, ds = load_data({**conf, "test_data": test_spec}, net.input_shape)
    classes = np.asarray(meta.get("classes", list(range(net.n_classes))))
    y = np.searchsorted(classes, ds.y)
    loss, acc = _accuracy_loss(net, ds.X, y)
    with open(os.path.join(conf["out"], "eval.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["split", "loss", "accuracy"])
        w.writerow([ds.split, repr(loss), repr(acc)])
    print(f"accuracy {acc:.4f} loss {loss:.6g}")
    return 0


def cmd_invert(conf):
    if not conf["model"] or not conf["model_nocn"]:
        raise ConfigError("invert needs --model (with N) and --model-nocn (without N)")
    for p in (conf["model"], conf["model_nocn"]):
        if not os.path.exists(p):
            raise ConfigError(f"model file {p} not found")
    nets = {"cn": load_model(conf["model"])[0], "nocn": load_model(conf["model_nocn"])[0]}
    if nets["cn"].input_shape != nets["nocn"].input_shape:
        raise ConfigError("the two inversion models take different input shapes")
    shape = nets["cn"].input_shape
    images = _inversion_inputs(conf, shape)
    out = conf["out"]
    for i, x in enumerate(images):
        write_pgm(os.path.join(out, f"img{i}_original.pgm"), to_display(x[0]))
        for tag, net in nets.items():
            target = record_target(net, x)
            init = x if conf["init_original"] else "random"
            img, trace = hallucinate(net, target, init=init, steps=conf["steps"], random_state=conf["seed"] + i)
            write_pgm(os.path.join(out, f"img{i}_{tag}.pgm"), to_display(img[0]))
            with open(os.path.join(out, f"img{i}_{tag}_loss.csv"), "w", newline="") as f:
                w = csv.writer(f, lineterminator="\n")
                w.writerow(["step", "loss"])
                w.writerows([k, repr(v)] for k, v in enumerate(trace))
            print(f"image {i} {tag}: loss {trace[0]:.6g} -> {trace[-1]:.6g} in {len(trace) - 1} steps")
    return 0


def _inversion_inputs(conf, shape):
    spec = conf["data"]
    if spec.startswith("synthetic:"):
        from .data import sample_crops

        n = int(spec.split(":", 1)[1])
        crops = sample_crops(n, max(shape[1:]), random_state=conf["seed"])
        return [c[:, : shape[1], : shape[2]] - c.mean() for c in crops]
    if os.path.isdir(spec):
        files = sorted(f for f in os.listdir(spec) if f.lower().endswith((".pgm", ".ppm", ".pnm")))
        paths = [os.path.join(spec, f) for f in files]
    else:
        paths = [spec]
    if not paths:
        raise FormatError(f"{spec}: no PGM/PPM images")
    return [_fit_input(read_image(p), shape) for p in paths]


def cmd_export(conf):
    if not conf["model"]:
        raise ConfigError("export needs --model")
    net, _ = load_model(conf["model"])
    for p in _export_filters(net, conf["out"], ""):
        print(p)
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "invert": cmd_invert,
    "export": cmd_export,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="sparsefeat", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config")
        p.add_argument("--data")
        p.add_argument("--test-data", dest="test_data")
        p.add_argument("--arch")
        p.add_argument("--encoder", choices=["si", "tanh"])
        p.add_argument("--protocol")
        p.add_argument("--seed")
        p.add_argument("--out")
        p.add_argument("--epochs")
        p.add_argument("--lr")
        p.add_argument("--lambda-l1", dest="lambda_l1")
        p.add_argument("--batch-size", dest="batch_size")
        p.add_argument("--n-patches", dest="n_patches")
        p.add_argument("--conv-region", dest="conv_region")
        p.add_argument("--head-l1", dest="head_l1")
        p.add_argument("--head-l2", dest="head_l2")
        p.add_argument("--dpsd-iter", dest="dpsd_iter")
        p.add_argument("--checkpoint")
        p.add_argument("--model")
        p.add_argument("--model-nocn", dest="model_nocn")
        p.add_argument("--steps")
        p.add_argument("--init-original", dest="init_original", action="store_const", const="true")
        p.add_argument("--threads")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        conf = resolve_config(args)
        echo_config(conf)
        with threadpool_limits(conf["threads"] or None):
            return COMMANDS[args.command](conf)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
