"""Command-line entry point: ``wavepesq <subcommand> [flags]``.

Exit status is 0 on success, 1 on a domain error (one ``error: <Kind>:
<detail>`` line on stderr) and 2 on a usage error. Metrics go to stdout as
``key=value`` lines. Every output file is written to a temporary sibling
and renamed into place, so a failed command leaves no partial output.
"""
from __future__ import annotations

import argparse
import io
import json
import os
import shutil
import sys
import tempfile
from dataclasses import fields

import numpy as np

from . import noise_lab, pesqnet, quality_loss, training
from .audio_io import SAMPLE_RATE, AudioBuffer, atomic_write_bytes, read_wav, wav_bytes
from .errors import (
    ConfigInvalid,
    EmptyCorpus,
    EmptyDataset,
    IoError,
    NotFound,
    ParseError,
    ShapeMismatch,
    UnknownSpeaker,
    WavePesqError,
)
from .pesqnet import ModelConfig
from .training import SegmentPair, TrainConfig

MANIFEST = "manifest.jsonl"
DATASET_META = "dataset.json"
SPLITS = ("train", "val")


class UsageError(Exception):
    def __init__(self, message, usage=""):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}", self.format_usage())


def _emit(stream, /, **kv):
    for k, v in kv.items():
        if isinstance(v, float):
            v = repr(v)
        print(f"{k}={v}", file=stream)


def _fmt(x: float) -> str:
    return repr(float(x))


# --------------------------------------------------------------------------
# corpus discovery and staged directory output


def find_wavs(root):
    """Sorted ``(relative_path, absolute_path)`` for every ``*.wav`` under ``root``."""
    root = os.fspath(root)
    if not os.path.isdir(root):
        raise NotFound(f"no such directory: {root}")
    found = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in filenames:
            if name.lower().endswith(".wav"):
                full = os.path.join(dirpath, name)
                found.append((os.path.relpath(full, root), full))
    found.sort()
    return found


def file_identity(rel_path: str):
    """``(file_id, speaker)`` for a corpus file.

    The speaker is the top directory when the file sits in a subdirectory,
    otherwise the stem up to the first underscore.
    """
    parts = rel_path.replace("\\", "/").split("/")
    stem = os.path.splitext(parts[-1])[0]
    if len(parts) > 1:
        speaker = parts[0]
        file_id = "-".join(parts[:-1] + [stem])
    else:
        speaker = stem.split("_", 1)[0]
        file_id = stem
    return file_id, speaker


def load_corpus(root):
    files = find_wavs(root)
    if not files:
        raise EmptyCorpus(f"no .wav files under {root}")
    out = []
    for rel, full in files:
        file_id, speaker = file_identity(rel)
        out.append((file_id, speaker, read_wav(full)))
    return out


class StagedDir:
    """Collect files in a hidden sibling directory and move them in on success."""

    def __init__(self, target):
        self.target = os.path.abspath(os.fspath(target))
        parent = os.path.dirname(self.target)
        try:
            os.makedirs(parent, exist_ok=True)
            self.tmp = tempfile.mkdtemp(prefix=".stage-", dir=parent)
        except OSError as exc:
            raise IoError(f"cannot stage output for {self.target}: {exc}") from exc

    def path(self, name):
        return os.path.join(self.tmp, name)

    def write(self, name, payload: bytes):
        with open(self.path(name), "wb") as fh:
            fh.write(payload)

    def commit(self):
        try:
            if not os.path.exists(self.target):
                os.replace(self.tmp, self.target)
                return
            if not os.path.isdir(self.target):
                raise IoError(f"{self.target} exists and is not a directory")
            for name in sorted(os.listdir(self.tmp)):
                os.replace(os.path.join(self.tmp, name), os.path.join(self.target, name))
            os.rmdir(self.tmp)
        except OSError as exc:
            raise IoError(f"cannot write {self.target}: {exc}") from exc

    def abort(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.commit()
        else:
            self.abort()
        return False


def _npy_bytes(arr) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr, dtype=np.float64), allow_pickle=False)
    return buf.getvalue()


def _jsonl(rows) -> bytes:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows).encode("utf-8")


def _read_jsonl(path):
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except FileNotFoundError as exc:
        raise NotFound(f"no such file: {path}") from exc
    rows = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{lineno}: {exc.msg}") from exc
    return rows


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise NotFound(f"no such file: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg}") from exc


# --------------------------------------------------------------------------
# dataset directories


def read_pairs_dir(pairs_dir):
    """Rebuild a :class:`DegradedPairSet` from a ``degrade`` output directory."""
    rows = _read_jsonl(os.path.join(os.fspath(pairs_dir), MANIFEST))
    pairs = []
    for row in rows:
        try:
            clean = read_wav(os.path.join(pairs_dir, row["clean"])).samples
            degraded = read_wav(os.path.join(pairs_dir, row["degraded"])).samples
            pairs.append(noise_lab.DegradedPair(clean, degraded, float(row["snr_db"]), str(row["file_id"]),
                                                int(row["segment_index"]), str(row["speaker"])))
        except KeyError as exc:
            raise ParseError(f"{MANIFEST}: missing key {exc}") from exc
    return noise_lab.DegradedPairSet(pairs)


def write_dataset(out_dir, train, val, speakers, frame_len, seed, labels_source):
    with StagedDir(out_dir) as stage:
        meta = {
            "frame_len": int(frame_len),
            "labels": labels_source,
            "seed": int(seed),
            "speakers": list(speakers),
            "sizes": {"train": len(train), "val": len(val)},
        }
        stage.write(DATASET_META, (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode("utf-8"))
        for split, data in zip(SPLITS, (train, val)):
            shape = (len(data), frame_len)
            stage.write(f"{split}_clean.npy", _npy_bytes(np.array([p.clean for p in data]).reshape(shape)))
            stage.write(f"{split}_degraded.npy", _npy_bytes(np.array([p.degraded for p in data]).reshape(shape)))
            stage.write(f"{split}_meta.jsonl", _jsonl(
                {"name": p.name, "speaker": speakers[p.speaker], "score": p.score} for p in data))


def read_dataset(path):
    """``(meta, {"train": [...], "val": [...]})`` from a ``build-dataset`` directory."""
    path = os.fspath(path)
    meta = _read_json(os.path.join(path, DATASET_META))
    speakers = list(meta.get("speakers", []))
    index = {s: i for i, s in enumerate(speakers)}
    frame_len = int(meta.get("frame_len", 0))
    splits = {}
    for split in SPLITS:
        rows = _read_jsonl(os.path.join(path, f"{split}_meta.jsonl"))
        arrays = []
        for kind in ("clean", "degraded"):
            f = os.path.join(path, f"{split}_{kind}.npy")
            try:
                arrays.append(np.load(f, allow_pickle=False))
            except FileNotFoundError as exc:
                raise NotFound(f"no such file: {f}") from exc
            except ValueError as exc:
                raise ParseError(f"{f}: {exc}") from exc
        clean, degraded = arrays
        if clean.shape != (len(rows), frame_len) or degraded.shape != clean.shape:
            raise ShapeMismatch(f"{split} arrays {clean.shape}/{degraded.shape} vs {len(rows)} rows of {frame_len}")
        data = []
        for i, row in enumerate(rows):
            if row["speaker"] not in index:
                raise UnknownSpeaker(f"{split} row {i}: speaker {row['speaker']!r}")
            data.append(SegmentPair(clean[i], degraded[i], index[row["speaker"]], float(row["score"]), row["name"]))
        splits[split] = data
    return meta, splits


def _remap_speakers(data, dataset_speakers, model):
    """Re-index dataset speakers into the model's speaker table."""
    out = []
    for p in data:
        idx = model.speaker_index(dataset_speakers[p.speaker])
        out.append(SegmentPair(p.clean, p.degraded, idx, p.score, p.name))
    return out


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_noise(args, out):
    corpus = load_corpus(args.corpus)
    samples = np.concatenate([buf.samples for _, _, buf in corpus])
    n = int(round(args.duration_s * SAMPLE_RATE))
    if n < 1:
        raise ConfigInvalid("--duration-s must give at least one sample")
    noise = noise_lab.make_ssn(samples, n, args.seed)
    atomic_write_bytes(args.out, wav_bytes(noise))
    _emit(out, samples=n, duration_s=n / SAMPLE_RATE, out=args.out)


def _parse_snrs(text):
    try:
        snrs = [float(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"--snrs: {exc}") from exc
    if not snrs:
        raise UsageError("--snrs must list at least one value")
    return snrs


def cmd_degrade(args, out):
    corpus = load_corpus(args.corpus)
    files = [(fid, buf) for fid, _, buf in corpus]
    speakers = {fid: spk for fid, spk, _ in corpus}
    pairs = noise_lab.degrade_corpus(files, _parse_snrs(args.snrs), args.frame, args.seed, speakers)
    rows = []
    with StagedDir(args.out) as stage:
        for p in pairs:
            stage.write(p.clean_name, wav_bytes(AudioBuffer(p.clean)))
            stage.write(p.degraded_name, wav_bytes(AudioBuffer(p.degraded)))
            rows.append({"clean": p.clean_name, "degraded": p.degraded_name, "file_id": p.source_id,
                         "segment_index": p.segment_index, "snr_db": p.snr_db, "speaker": p.speaker})
        stage.write(MANIFEST, _jsonl(rows))
    _emit(out, files=len(files), pairs=len(rows), speakers=len(set(speakers.values())), out=args.out)


def cmd_build_dataset(args, out):
    pairs = read_pairs_dir(args.pairs)
    if len(pairs) == 0:
        raise EmptyDataset(f"{args.pairs} holds no pairs")
    lengths = {p.clean.shape[0] for p in pairs}
    if len(lengths) != 1:
        raise ShapeMismatch(f"pairs have mixed lengths {sorted(lengths)}")
    speakers = sorted({p.speaker for p in pairs})
    labels = "proxy" if args.labels == "proxy" else training.load_labels(args.labels)
    train, val = training.assemble_dataset(pairs, labels, {s: i for i, s in enumerate(speakers)},
                                           args.seed, args.val_fraction)
    write_dataset(args.out, train, val, speakers, lengths.pop(), args.seed,
                  "proxy" if args.labels == "proxy" else os.path.basename(args.labels))
    _emit(out, train=len(train), val=len(val), speakers=len(speakers), out=args.out)


_MODEL_FLAGS = [f.name for f in fields(ModelConfig) if f.name not in ("frame_len", "speaker_count")]
_TRAIN_FLAGS = [n for n in TrainConfig.field_names() if n not in ("steps", "seed", "val_fraction")]


def _train_settings(args, frame_len, n_speakers):
    file_cfg = {}
    if args.config is not None:
        file_cfg = _read_json(args.config)
        if not isinstance(file_cfg, dict):
            raise ConfigInvalid(f"{args.config}: expected a JSON object")
    known = set(_MODEL_FLAGS) | set(TrainConfig.field_names()) | {"frame_len", "speaker_count"}
    unknown = sorted(set(file_cfg) - known)
    if unknown:
        raise ConfigInvalid(f"{args.config}: unknown fields {unknown}")
    merged = dict(file_cfg)
    for name in _MODEL_FLAGS + _TRAIN_FLAGS + ["steps", "seed"]:
        value = getattr(args, name, None)
        if value is not None:
            merged[name] = value
    for name, actual in (("frame_len", frame_len), ("speaker_count", n_speakers)):
        if name in merged and int(merged[name]) != actual:
            raise ConfigInvalid(f"{name}={merged[name]} in config, dataset has {actual}")
        merged[name] = actual
    model_cfg = ModelConfig(**{k: int(merged[k]) for k in merged if k in set(_MODEL_FLAGS) | {"frame_len", "speaker_count"}})
    pesqnet.validate(model_cfg)
    tc_kwargs = {k: merged[k] for k in TrainConfig.field_names() if k in merged}
    for k in ("batch_size", "steps", "seed"):
        if k in tc_kwargs:
            tc_kwargs[k] = int(tc_kwargs[k])
    return model_cfg, TrainConfig(**tc_kwargs)


def cmd_train(args, out):
    meta, splits = read_dataset(args.dataset)
    speakers = list(meta["speakers"])
    model_cfg, tc = _train_settings(args, int(meta["frame_len"]), len(speakers))
    model = pesqnet.build(model_cfg, tc.seed, speakers)
    trained, history = training.train(model, (splits["train"], splits["val"]), tc)
    training.save_checkpoint(trained, args.out)
    for e in history:
        print(f"step={e.step} train_loss={_fmt(e.train_loss)} val_loss={_fmt(e.val_loss)}", file=out)
    last = history[-1]
    if last.step == tc.steps:
        final = (last.train_loss, last.val_loss)
    else:
        final = training.monitor_losses(trained, splits["train"], splits["val"])
    _emit(out, final_train_loss=float(final[0]), final_val_loss=float(final[1]),
          parameters=sum(v.size for v in trained.params.values()), out=args.out)


def _read_frame(path, frame_len):
    x = read_wav(path).samples
    if x.shape[0] != frame_len:
        raise ShapeMismatch(f"{path}: {x.shape[0]} samples, model expects {frame_len}")
    return x


def cmd_predict(args, out):
    model = training.load_checkpoint(args.ckpt)
    n = model.config.frame_len
    speaker = model.speaker_index(args.speaker)
    score = pesqnet.forward(model, _read_frame(args.clean, n), _read_frame(args.degraded, n), speaker)
    _emit(out, score=float(score))


def _dataset_for_model(path, model, split):
    meta, splits = read_dataset(path)
    if int(meta["frame_len"]) != model.config.frame_len:
        raise ShapeMismatch(f"dataset frame_len {meta['frame_len']} vs model {model.config.frame_len}")
    names = SPLITS if split == "all" else (split,)
    data = [p for s in names for p in splits[s]]
    return _remap_speakers(data, list(meta["speakers"]), model)


def cmd_eval(args, out):
    model = training.load_checkpoint(args.ckpt)
    data = _dataset_for_model(args.dataset, model, args.split)
    mse, r = training.evaluate(model, data)
    _emit(out, split=args.split, n=len(data), mse=float(mse), pearson_r=float(r))


def cmd_grad_check(args, out):
    cfg = pesqnet.grad_check_config(args.layers, args.frame, args.seed)
    report = pesqnet.gradient_check(cfg, args.seed, epsilon=args.epsilon, tolerance=args.tolerance)
    _emit(out, max_rel_err=float(report.max_rel_err), checked=report.checked,
          passed=str(report.passed).lower(), kernel_size=cfg.kernel_size)
    if not report.passed:
        raise _CheckFailed(f"max relative error {report.max_rel_err:.3e} >= {args.tolerance:.1e}")


class _CheckFailed(WavePesqError):
    @property
    def kind(self):
        return "GradCheckFailed"


def cmd_enhance_demo(args, out):
    model = training.load_checkpoint(args.ckpt)
    pairs = _dataset_for_model(args.dataset, model, "all")
    cfg = quality_loss.CombinedLossConfig(args.lam, args.mode)
    tc = TrainConfig(learning_rate=args.learning_rate, batch_size=args.batch_size, steps=args.steps,
                     seed=args.seed, val_fraction=args.val_fraction)
    fir, report = quality_loss.train_fir_enhancer(model, pairs, cfg, tc)
    if args.out is not None:
        atomic_write_bytes(args.out, "".join(_fmt(t) + "\n" for t in fir.taps).encode("ascii"))
    b, a = report["before"], report["after"]
    _emit(out, before_val_mse=b["val_mse"], after_val_mse=a["val_mse"],
          before_mean_score=b["mean_score"], after_mean_score=a["mean_score"])
    if args.out is not None:
        _emit(out, out=args.out)


def cmd_corr_study(args, out):
    r, n, scatter = quality_loss.correlation_study(args.scores, args.scatter)
    print(f"pearson_r={r:.6f}", file=out)
    _emit(out, n=n, scatter=scatter)


# --------------------------------------------------------------------------
# parser


def _real(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if not np.isfinite(v):
        raise argparse.ArgumentTypeError(f"not finite: {text!r}")
    return v


def _u64(text):
    try:
        v = int(text, 10)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an unsigned integer: {text!r}")
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"out of range for u64: {text!r}")
    return v


def _positive(text):
    v = _u64(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _flag(name):
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wavepesq", description="Learned full-reference speech quality scoring.")
    sub = p.add_subparsers(dest="command", metavar="<command>", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("gen-noise", help="synthesise speech-shaped noise from a corpus")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--duration-s", type=_real, required=True)
    s.add_argument("--seed", type=_u64, required=True)
    s.set_defaults(func=cmd_gen_noise)

    s = sub.add_parser("degrade", help="cut a corpus into segments and mix each with SSN")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--frame", type=_positive, default=4095)
    s.add_argument("--snrs", default="0,5,10,15")
    s.add_argument("--seed", type=_u64, required=True)
    s.set_defaults(func=cmd_degrade)

    s = sub.add_parser("build-dataset", help="attach labels and split into train/val")
    s.add_argument("--pairs", required=True)
    s.add_argument("--labels", required=True, help="JSONL label file or 'proxy'")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=_u64, required=True)
    s.add_argument("--val-fraction", type=_real, default=0.1)
    s.set_defaults(func=cmd_build_dataset)

    s = sub.add_parser("train", help="fit the regressor to a dataset")
    s.add_argument("--dataset", required=True)
    s.add_argument("--steps", type=_u64, default=None)
    s.add_argument("--seed", type=_u64, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", default=None, help="JSON object of ModelConfig/TrainConfig fields")
    for name in _MODEL_FLAGS:
        s.add_argument(_flag(name), dest=name, type=_u64, default=None)
    for name in _TRAIN_FLAGS:
        s.add_argument(_flag(name), dest=name, type=_positive if name == "batch_size" else _real, default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="score one clean/degraded segment pair")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--clean", required=True)
    s.add_argument("--degraded", required=True)
    s.add_argument("--speaker", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("eval", help="MSE and Pearson r on a dataset split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--split", choices=("val", "train", "all"), default="val")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("grad-check", help="finite-difference check of the regressor gradients")
    s.add_argument("--seed", type=_u64, required=True)
    s.add_argument("--layers", type=_positive, default=3)
    s.add_argument("--frame", type=_positive, default=32)
    s.add_argument("--epsilon", type=_real, default=1e-5)
    s.add_argument("--tolerance", type=_real, default=1e-6)
    s.set_defaults(func=cmd_grad_check)

    s = sub.add_parser("enhance-demo", help="train a 64-tap FIR through the frozen scorer")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--lambda", dest="lam", type=_real, required=True)
    s.add_argument("--steps", type=_u64, required=True)
    s.add_argument("--seed", type=_u64, required=True)
    s.add_argument("--mode", choices=(quality_loss.MAXIMIZE_QUALITY, quality_loss.PAPER_LITERAL),
                   default=quality_loss.MAXIMIZE_QUALITY)
    s.add_argument("--learning-rate", type=_real, default=1e-3)
    s.add_argument("--batch-size", type=_positive, default=8)
    s.add_argument("--val-fraction", type=_real, default=0.2)
    s.add_argument("--out", default=None, help="write the trained taps, one per line")
    s.set_defaults(func=cmd_enhance_demo)

    s = sub.add_parser("corr-study", help="segment-vs-full score correlation")
    s.add_argument("--scores", required=True)
    s.add_argument("--scatter", default=None)
    s.set_defaults(func=cmd_corr_study)
    return p


def run_cli(argv=None, stdout=None, stderr=None) -> int:
    stdout = sys.stdout if stdout is None else stdout
    stderr = sys.stderr if stderr is None else stderr
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print((exc.usage or parser.format_usage()).rstrip(), file=stderr)
        print(f"usage error: {exc}", file=stderr)
        return 2
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 2
    try:
        args.func(args, stdout)
    except UsageError as exc:
        print(f"usage error: {exc}", file=stderr)
        return 2
    except WavePesqError as exc:
        print(f"error: {exc.kind}: {_one_line(exc)}", file=stderr)
        return 1
    except OSError as exc:
        print(f"error: IoError: {_one_line(exc)}", file=stderr)
        return 1
    except (ValueError, KeyError, TypeError) as exc:
        # malformed inputs that slipped past the typed checks
        print(f"error: {type(exc).__name__}: {_one_line(exc)}", file=stderr)
        return 1
    return 0


def _one_line(exc) -> str:
    return " ".join(str(exc).split()) or type(exc).__name__


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
