"""Command line entry point: ``modflow <command> [--config PATH] [--seed N] [--threads N] ...``.

Settings come from a flat key=value config file (``#`` comments) and are
overridden by flags. Exit codes: 0 ok, 1 runtime failure, 2 usage/config error.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

COMMANDS = ("train", "generate", "encode", "eval", "optimize", "toy")

# key -> (type, default); shared by file and flags
SETTINGS = {
    "data": (str, None),
    "format": (str, "smiles-lines"),
    "heldout": (str, None),
    "generated": (str, None),
    "checkpoint": (str, None),
    "resume": (str, None),
    "vocab": (str, None),
    "out": (str, "runs/out"),
    "mode": (str, "atom"),
    "alphabet": (str, "qm9"),
    "epochs": (int, 50),
    "batch_size": (int, 64),
    "lr": (float, 1e-3),
    "eps": (float, 0.05),
    "rtol": (float, 1e-5),
    "atol": (float, 1e-5),
    "t_end": (float, 1.0),
    "vocab_cap": (int, 30),
    "count": (int, 1000),
    "smiles": (str, None),
    "step": (float, 0.5),
    "steps": (int, 5),
    "pattern": (str, "chessboard"),
    "n": (int, 4),
    "size": (int, 1),
    "samples": (int, 100),
    "bins": (int, 20),
}


class UsageError(Exception):
    pass


def read_config_file(path) -> dict:
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in SETTINGS and key not in ("seed", "threads"):
                raise UsageError(f"{path}:{lineno}: unknown setting {key!r}")
            out[key] = value
    return out


def build_parser():
    ap = argparse.ArgumentParser(prog="modflow", description="Modular graph flows: train, generate, evaluate.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--threads", type=int)
    for key, (typ, _) in SETTINGS.items():
        ap.add_argument("--" + key.replace("_", "-"), dest=key, type=typ)
    return ap


def resolve(args) -> dict:
    """Defaults < config file < flags; values converted to their declared types."""
    cfg = {k: d for k, (_, d) in SETTINGS.items()}
    cfg["seed"], cfg["threads"] = 0, 1
    if args.config:
        for k, v in read_config_file(args.config).items():
            typ = SETTINGS[k][0] if k in SETTINGS else int
            try:
                cfg[k] = typ(v)
            except ValueError:
                raise UsageError(f"bad value for {k}: {v!r}") from None
    for k in list(SETTINGS) + ["seed", "threads"]:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    if cfg["mode"] not in ("atom", "tree"):
        raise UsageError(f"mode must be atom or tree, got {cfg['mode']!r}")
    if cfg["threads"] < 1:
        raise UsageError("--threads must be >= 1")
    return cfg


def _require_file(cfg, key):
    path = cfg.get(key)
    if not path:
        raise UsageError(f"--{key.replace('_', '-')} is required")
    if not os.path.exists(path):
        raise UsageError(f"{key} path does not exist: {path}")
    return path


def _write_echo(cfg, command):
    os.makedirs(cfg["out"], exist_ok=True)
    with open(os.path.join(cfg["out"], "config.echo"), "w", encoding="utf-8") as fh:
        fh.write(f"# modflow {command}\n")
        for k in sorted(cfg):
            if cfg[k] is not None:
                fh.write(f"{k}={cfg[k]}\n")


def _alphabet(name):
    from .chem import QM9_ALPHABET, ZINC_ALPHABET
    table = {"qm9": QM9_ALPHABET, "zinc": ZINC_ALPHABET}
    if name not in table:
        raise UsageError(f"unknown alphabet {name!r} (qm9 or zinc)")
    return table[name]


def _corpus(cfg, key="data"):
    from .chem import read_corpus
    path = _require_file(cfg, key)
    corpus = read_corpus(path, cfg["format"], _alphabet(cfg["alphabet"]))
    for line, msg in corpus.errors:
        print(f"warning: {path}:{line}: {msg}", file=sys.stderr)
    return corpus.graphs


def _load_model(cfg):
    from .model import load_checkpoint
    model, opt, meta = load_checkpoint(_require_file(cfg, "checkpoint"))
    return model, opt, meta


def _model_corpus(model, graphs):
    from .model import prepare_corpus
    kept, skipped = prepare_corpus(model, graphs)
    if skipped:
        print(f"warning: skipped {skipped} molecules with rings outside the vocabulary", file=sys.stderr)
    return kept


def cmd_train(cfg):
    from .model import ModFlowModel, TrainConfig, load_checkpoint, train
    from .ode import SolverConfig
    from .rings import ClusterVocabulary, extract_ring_vocabulary

    graphs = _corpus(cfg)
    _write_echo(cfg, "train")
    out = cfg["out"]
    ckdir = os.path.join(out, "checkpoints")
    os.makedirs(ckdir, exist_ok=True)
    tcfg = TrainConfig(lr=cfg["lr"], batch_size=cfg["batch_size"], epochs=cfg["epochs"], seed=cfg["seed"])
    opt, start = None, 0
    if cfg["resume"]:
        model, opt, meta = load_checkpoint(_require_file(cfg, "resume"))
        start = int(meta["epoch"])
    else:
        vocab = None
        if cfg["mode"] == "tree":
            if cfg["vocab"]:
                with open(_require_file(cfg, "vocab"), encoding="utf-8") as fh:
                    vocab = ClusterVocabulary.from_dict(json.load(fh))
            else:
                vocab = extract_ring_vocabulary(graphs, cfg["vocab_cap"])
            with open(os.path.join(out, "vocab.json"), "w", encoding="utf-8") as fh:
                json.dump(vocab.to_dict(), fh, indent=1)
        solver = SolverConfig(rtol=cfg["rtol"], atol=cfg["atol"], t_end=cfg["t_end"])
        model = ModFlowModel.create(_alphabet(cfg["alphabet"]), seed=cfg["seed"], mode=cfg["mode"], vocab=vocab,
                                    solver=solver, eps=cfg["eps"])
    graphs = _model_corpus(model, graphs)
    loss_path = os.path.join(out, "loss.csv")
    rows = []
    if start and os.path.exists(loss_path):
        with open(loss_path, encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh)][1:start + 1]

    def log(rec, m, o):
        rows.append([rec.epoch, repr(rec.mean_loss), repr(rec.nfe_mean)])
        with open(loss_path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "mean_loss", "nfe_mean"])
            w.writerows(rows)
        print(f"epoch {rec.epoch} loss {rec.mean_loss:.6f} nfe {rec.nfe_mean:.1f}", flush=True)

    train(model, graphs, tcfg, callbacks=[log], opt=opt, start_epoch=start, checkpoint_dir=ckdir,
          config_echo=cfg_text(cfg))
    return 0


def cfg_text(cfg):
    return "\n".join(f"{k}={cfg[k]}" for k in sorted(cfg) if cfg[k] is not None)


def _write_smiles_lines(path, graphs):
    from .chem import write_smiles
    with open(path, "w", encoding="utf-8") as fh:
        for k, g in enumerate(graphs):
            if g is None:
                fh.write(f"# sample {k}: could not be expanded to atoms\n")
            else:
                fh.write(write_smiles(g) + "\n")


def cmd_generate(cfg):
    import numpy as np
    from .graph import GraphError, wl_hash
    from .metrics import compute_metrics, metrics_csv
    from .model import sample_topology

    model, _, _ = _load_model(cfg)
    graphs = _model_corpus(model, _corpus(cfg))
    _write_echo(cfg, "generate")
    rng = np.random.default_rng(cfg["seed"])
    out, t0 = [], time.perf_counter()
    for _ in range(cfg["count"]):
        topo = sample_topology(graphs, rng)
        try:
            out.append(model.generate(topo, rng))
        except GraphError:
            out.append(None)
    per_mol = (time.perf_counter() - t0) / max(cfg["count"], 1)
    _write_smiles_lines(os.path.join(cfg["out"], "generated.smi"), out)
    with open(os.path.join(cfg["out"], "metrics.csv"), "w", encoding="utf-8") as fh:
        if out:
            train_hashes = {wl_hash(_atoms(model, g)) for g in graphs}
            fh.write(metrics_csv(compute_metrics(out, train_hashes),
                                 extra=[("timing", "seconds_per_molecule", per_mol, 0.0)]))
        else:
            fh.write("metric,name,value,std\n")
    print(f"generated {len(out)} molecules, {per_mol:.4f} s/molecule")
    return 0


def _atoms(model, g):
    from .rings import expand_tree
    return expand_tree(g, model.vocab) if model.mode == "tree" else g


def cmd_encode(cfg):
    model, _, _ = _load_model(cfg)
    graphs = _model_corpus(model, _corpus(cfg))
    _write_echo(cfg, "encode")
    with open(os.path.join(cfg["out"], "latents.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["molecule", "node", "logdet"] + [f"z{k}" for k in range(model.K)])
        for m, g in enumerate(graphs):
            st = model.encode(g)
            for i in range(g.num_nodes):
                w.writerow([m, i, repr(float(st.logdet[i]))] + [repr(float(v)) for v in st.z[i]])
    return 0


def cmd_eval(cfg):
    import numpy as np
    from .chem import read_corpus
    from .graph import wl_hash
    from .metrics import compute_metrics, distribution_report, metrics_csv

    model, _, _ = _load_model(cfg)
    train_graphs = _model_corpus(model, _corpus(cfg))
    train_atoms = [_atoms(model, g) for g in train_graphs]
    gen_path = _require_file(cfg, "generated")
    generated = read_corpus(gen_path, "smiles-lines", _alphabet(cfg["alphabet"])).graphs
    _write_echo(cfg, "eval")
    recon = float("nan")
    if cfg["heldout"]:
        held = _model_corpus(model, _corpus(cfg, "heldout"))
        hits = [np.array_equal(model.decode(model.encode(g).z, g.topology()).labels, _atoms(model, g).labels)
                for g in held]
        recon = 100.0 * float(np.mean(hits)) if hits else float("nan")
    rep = compute_metrics(generated, {wl_hash(g) for g in train_atoms}, reconstruction=recon) if generated else None
    with open(os.path.join(cfg["out"], "metrics.csv"), "w", encoding="utf-8") as fh:
        fh.write(metrics_csv(rep) if rep else "metric,name,value,std\n")
    with open(os.path.join(cfg["out"], "hist.csv"), "w", encoding="utf-8") as fh:
        fh.write(distribution_report(train_atoms, generated, bins=cfg["bins"]))
    if rep:
        print(f"validity {rep.validity:.2f} uniqueness {rep.uniqueness:.2f} novelty {rep.novelty:.2f} "
              f"reconstruction {rep.reconstruction:.2f}")
    return 0


def cmd_optimize(cfg):
    from .chem import parse_smiles, write_smiles
    from .metrics import fit_property_regression, latent_ascent, property_mw

    model, _, _ = _load_model(cfg)
    graphs = _corpus(cfg)
    kept = [g for g in graphs if _representable(model, g)]
    if not cfg["smiles"]:
        raise UsageError("--smiles is required for optimize")
    start = parse_smiles(cfg["smiles"], _alphabet(cfg["alphabet"]))
    _write_echo(cfg, "optimize")
    pm = fit_property_regression(model, kept, property_mw, "mw")
    steps = latent_ascent(model, start, pm, cfg["step"], cfg["steps"])
    with open(os.path.join(cfg["out"], "optimize.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "predicted_mw", "valid", "mw", "smiles"])
        w.writerow([0, repr(pm.predict_latent(model.encode(start).z)), True, repr(property_mw(start)),
                    write_smiles(start)])
        for s in steps:
            smi = write_smiles(s.graph) if s.graph is not None else ""
            w.writerow([s.step, repr(s.predicted), s.valid, repr(s.value), smi])
    print(f"fit R2 {pm.r2:.4f}; {len(steps)} candidates written")
    return 0


def _representable(model, g):
    from .rings import RingNotInVocabulary
    try:
        model.prepare(g)
        return True
    except RingNotInVocabulary:
        return False


def cmd_toy(cfg):
    from .toy import ToyConfig, make_pattern, run_toy, to_csv, to_pgm

    tc = ToyConfig(pattern=cfg["pattern"], n=cfg["n"], size=cfg["size"], epochs=cfg["epochs"], lr=cfg["lr"],
                   seed=cfg["seed"], samples=cfg["samples"], eps=cfg["eps"])
    try:
        make_pattern(tc)  # validate before the echo
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _write_echo(cfg, "toy")
    tdir = os.path.join(cfg["out"], "toy")
    os.makedirs(tdir, exist_ok=True)
    rows = []
    model, hist, acc, samples = run_toy(tc, callbacks=[lambda r, m, o: rows.append(r)])
    with open(os.path.join(cfg["out"], "loss.csv"), "w", encoding="utf-8") as fh:
        fh.write("epoch,mean_loss,nfe_mean\n")
        fh.writelines(f"{r.epoch},{r.mean_loss!r},{r.nfe_mean!r}\n" for r in hist)
    target = make_pattern(tc)
    with open(os.path.join(tdir, "target.pgm"), "w") as fh:
        fh.write(to_pgm(target))
    for k, s in enumerate(samples[:8]):
        with open(os.path.join(tdir, f"sample_{k}.pgm"), "w") as fh:
            fh.write(to_pgm(s))
        with open(os.path.join(tdir, f"sample_{k}.csv"), "w") as fh:
            fh.write(to_csv(s))
    with open(os.path.join(tdir, "accuracy.csv"), "w") as fh:
        fh.write(f"pattern,n,size,accuracy\n{tc.pattern},{tc.n},{tc.size},{acc!r}\n")
    print(f"{tc.pattern} n={tc.n} size={tc.size}: accuracy {acc:.4f}")
    return 0


HANDLERS = {"train": cmd_train, "generate": cmd_generate, "encode": cmd_encode, "eval": cmd_eval,
            "optimize": cmd_optimize, "toy": cmd_toy}


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        cfg = resolve(args)
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(cfg["threads"]))
        return HANDLERS[args.command](cfg)
    except UsageError as exc:
        print(f"modflow: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: one-line diagnostic, nonzero exit
        print(f"modflow: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
