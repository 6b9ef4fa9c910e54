"""Command-line surface: synth, train-base, extend, decode, evaluate, sweep,
count-params, gradcheck.

Configuration comes from an optional JSON file (--config) whose sections are
validated against the dataclass fields they feed; command-line flags win over
file values. All randomness descends from --seed, and every artifact is
written atomically (temp file + rename).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .basemodel import ModelConfig, train_base
from .checkpoint import (load_base_model, load_extension_model, save_base_model,
                         save_extension_model)
from .decoding import (SelectionPolicy, decode_primary_batch,
                       decode_secondary_batch, records_to_jsonl,
                       select_decoder_batch)
from .evaluation import evaluate, load_hyps_jsonl, load_refs_jsonl
from .extension import count_additional_params
from .rng import derive_seed
from .synthdata import (SynthParams, gen_dataset, gen_language,
                        load_language_roles, load_manifest, save_dataset)
from .trainer import TrainConfig, extend, loss_log_csv, sweep, sweep_csv


class UsageError(ValueError):
    pass


# preset used for the full-scale parameter-count check
WHISPER_LARGE_V2 = dict(feat_dim=80, d_model=1280, n_heads=20, n_enc_layers=32,
                        n_dec_layers=32, ffn_dim=5120, max_frames=4096,
                        primary_vocab=51865, secondary_vocab=2000,
                        las_hidden=512, las_embed=512, las_attn_dim=512)

_SECTION_TYPES = {"model": ModelConfig, "train": TrainConfig, "synth": SynthParams}
_SECTION_EXTRA = {"policy": {"tau", "beta", "beam", "max_len"}}


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as f:
        cfg = json.load(f)
    if not isinstance(cfg, dict):
        raise UsageError("config root must be a JSON object")
    for section, payload in cfg.items():
        if section in _SECTION_TYPES:
            allowed = {f.name for f in dataclasses.fields(_SECTION_TYPES[section])}
        elif section in _SECTION_EXTRA:
            allowed = _SECTION_EXTRA[section]
        else:
            raise UsageError(f"unknown config section '{section}'")
        unknown = set(payload) - allowed
        if unknown:
            raise UsageError(f"unknown keys in config section '{section}': "
                             f"{sorted(unknown)}")
    return cfg


def _merged(section: dict, overrides: dict) -> dict:
    out = dict(section)
    out.update({k: v for k, v in overrides.items() if v is not None})
    return out


def _atomic_write_text(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp, path)


def _log(msg: str) -> None:
    print(msg, flush=True)


# -- subcommands ------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    base_params = cfg.get("synth", {})
    existing = _merged(base_params, {"char_spread": args.existing_char_spread,
                                     "feat_dim": args.feat_dim,
                                     "noise_sigma": args.noise_sigma})
    new = _merged(base_params, {"char_spread": args.new_char_spread,
                                "feat_dim": args.feat_dim,
                                "noise_sigma": args.noise_sigma})
    p_ex = SynthParams(**existing)
    p_new = SynthParams(**new)
    languages, roles = {}, {}
    splits = {"train": [], "dev": [], "test": []}
    for role, count, params in (("existing", args.existing, p_ex),
                                ("new", args.new, p_new)):
        for i in range(count):
            name = f"{'ex' if role == 'existing' else 'nv'}{i}"
            lang = gen_language(derive_seed(args.seed, role, i), params, name=name)
            languages[name] = lang
            roles[name] = role
            ds = gen_dataset(lang, args.utts_per_lang, split_seed=args.seed)
            splits["train"] += ds.train
            splits["dev"] += ds.dev
            splits["test"] += ds.test
    save_dataset(args.out, languages, roles, splits)
    _log(f"wrote {sum(len(v) for v in splits.values())} utterances for "
         f"{len(languages)} languages to {args.out}")
    return 0


def _load_split_by_role(data_dir: str, split: str, role: str | None):
    utts = load_manifest(data_dir, split)
    if role is None:
        return utts
    roles = load_language_roles(data_dir)
    return [u for u in utts if roles[u.lang] == role]


def cmd_train_base(args) -> int:
    cfg = load_config(args.config)
    model_cfg = ModelConfig(**cfg.get("model", {}))
    train_utts = _load_split_by_role(args.data, "train", "existing")
    languages = sorted({u.lang for u in train_utts})
    model, log = train_base(model_cfg, train_utts, languages, steps=args.steps,
                            batch_size=args.batch_size, peak_lr=args.peak_lr,
                            seed=args.seed,
                            on_step=_progress(args.steps) if args.verbose else None)
    digest = save_base_model(args.out, model)
    if args.loss_log:
        _atomic_write_text(args.loss_log, loss_log_csv(log))
    _log(f"froze base checkpoint at {args.out} (digest {digest[:12]}..)")
    return 0


def _progress(total):
    def cb(step, loss):
        if step % 100 == 0 or step == total - 1:
            _log(f"  step {step}/{total} loss {loss:.4f}")
    return cb


def cmd_extend(args) -> int:
    cfg = load_config(args.config)
    train_over = {"steps": args.steps, "batch_size": args.batch_size,
                  "peak_lr": args.peak_lr, "alpha": args.alpha, "rank": args.rank,
                  "start_layer": args.start_layer, "seed": args.seed,
                  "sec_vocab_size": args.sec_vocab_size}
    tcfg = TrainConfig(**_merged(cfg.get("train", {}), train_over))
    base = load_base_model(args.base)
    data = _load_split_by_role(args.data, "train", "new")
    model, log = extend(base, data, tcfg,
                        on_step=_progress(tcfg.steps) if args.verbose else None)
    save_extension_model(args.out, model)
    if args.loss_log:
        _atomic_write_text(args.loss_log, loss_log_csv(log))
    _log(f"wrote extension checkpoint to {args.out} "
         f"(rank {tcfg.rank}, start layer {tcfg.start_layer})")
    return 0


def cmd_decode(args) -> int:
    cfg = load_config(args.config)
    pol = cfg.get("policy", {})
    tau = args.tau if args.tau is not None else pol.get("tau", 0.5)
    beta = args.beta if args.beta is not None else pol.get("beta", 0.0)
    beam = args.beam if args.beam is not None else pol.get("beam", 5)
    max_len = args.max_len if args.max_len is not None else pol.get("max_len", 64)
    base = load_base_model(args.base)
    utts = load_manifest(args.data, args.split)
    if args.mode in ("secondary", "auto") and not args.extension:
        raise UsageError(f"--extension is required for mode '{args.mode}'")
    if args.mode == "primary":
        transcripts = decode_primary_batch(base, utts, beam, max_len)
        records = [{"utt_id": u.utt_id, "chosen_decoder": "primary",
                    "transcript": transcripts[u.utt_id]} for u in utts]
    else:
        model = load_extension_model(args.extension, base)
        if args.mode == "secondary":
            transcripts = decode_secondary_batch(model, utts, beam, max_len)
            records = [{"utt_id": u.utt_id, "chosen_decoder": "secondary",
                        "transcript": transcripts[u.utt_id]} for u in utts]
        else:
            records = select_decoder_batch(model, utts,
                                           SelectionPolicy(tau=tau, beta=beta),
                                           beam, max_len)
    _atomic_write_text(args.out, records_to_jsonl(records))
    _log(f"decoded {len(records)} utterances ({args.mode}) -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    if args.refs:
        refs, lang_map = load_refs_jsonl(args.refs)
    else:
        utts = load_manifest(args.data, args.split)
        refs = {u.utt_id: u.text for u in utts}
        lang_map = {u.utt_id: u.lang for u in utts}
    hyps = load_hyps_jsonl(args.hyps)
    report = evaluate(refs, hyps, lang_map)
    print(report.table())
    if args.out:
        _atomic_write_text(args.out, report.to_json())
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    train_over = {"steps": args.steps, "batch_size": args.batch_size,
                  "peak_lr": args.peak_lr, "alpha": args.alpha, "seed": args.seed}
    tcfg = TrainConfig(**_merged(cfg.get("train", {}), train_over))
    base = load_base_model(args.base)
    train_utts = _load_split_by_role(args.data, "train", "new")
    eval_utts = _load_split_by_role(args.data, args.eval_split, "new")
    values = [int(v) for v in args.values.split(",")] if args.values else []
    axis = args.axis.replace("-", "_")
    rows = sweep(base, train_utts, eval_utts, axis, values, tcfg,
                 beam_size=args.beam,
                 on_run=lambda r: _log(f"  {axis}={r['value']}: params={r['params']} "
                                       f"cer={r['avg_cer']:.4f}"))
    _atomic_write_text(args.out, sweep_csv(rows))
    _log(f"wrote sweep results -> {args.out}")
    return 0


def cmd_count_params(args) -> int:
    cfg = load_config(args.config)
    if args.preset == "whisper-large-v2":
        model_cfg = ModelConfig(**WHISPER_LARGE_V2)
    else:
        model_cfg = ModelConfig(**cfg.get("model", {}))
    counts = count_additional_params(model_cfg, args.rank, args.start_layer)
    print(json.dumps(counts, indent=1))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import grad_check
    from .extension import secondary_teacher_forced_loss
    from .tokenizer import lang_token
    from .fdsuite import build_tiny_extension_f64

    model = build_tiny_extension_f64(seed=args.seed)
    rng = np.random.Generator(np.random.Philox(derive_seed(args.seed, "gradcheck")))
    feats = rng.standard_normal((6, model.cfg.feat_dim))
    v = model.sec_vocab
    target = ([v.special(lang_token("n"))] + v.encode("cd dc") + [v.special("<|eot|>")])

    rep = grad_check(lambda: secondary_teacher_forced_loss(model, feats, target),
                     model.trainable_params(), tol=args.tol,
                     max_elems_per_param=args.max_elems)
    print(rep.summary())
    for name in sorted(rep.per_param):
        print(f"  {name:<28} max rel err {rep.per_param[name]:.3e}")
    return 0 if rep.passed else 1


# -- argument parsing -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dualpipe",
                                 description="dual-pipeline LoRA language extension, desk scale")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("synth", help="generate synthetic language datasets")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--existing", type=int, default=2)
    p.add_argument("--new", type=int, default=2)
    p.add_argument("--utts-per-lang", type=int, default=300)
    p.add_argument("--feat-dim", type=int)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--existing-char-spread", type=float)
    p.add_argument("--new-char-spread", type=float)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train-base", help="train and freeze the base model")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--peak-lr", type=float, default=1e-3)
    p.add_argument("--loss-log")
    p.set_defaults(fn=cmd_train_base)

    p = sub.add_parser("extend", help="train the secondary pipeline on new languages")
    common(p)
    p.add_argument("--base", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--peak-lr", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--rank", type=int)
    p.add_argument("--start-layer", type=int)
    p.add_argument("--sec-vocab-size", type=int)
    p.add_argument("--loss-log")
    p.set_defaults(fn=cmd_extend)

    p = sub.add_parser("decode", help="decode a dataset split")
    common(p)
    p.add_argument("--base", required=True)
    p.add_argument("--extension")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--mode", choices=["primary", "secondary", "auto"], default="auto")
    p.add_argument("--tau", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--beam", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("evaluate", help="score decodes against references")
    common(p)
    p.add_argument("--hyps", required=True)
    p.add_argument("--refs", help="reference JSONL; or use --data/--split")
    p.add_argument("--data")
    p.add_argument("--split", default="test")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("sweep", help="train+evaluate across rank or start layer")
    common(p)
    p.add_argument("--base", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--axis", choices=["rank", "start-layer"], required=True)
    p.add_argument("--values", required=True, help="comma-separated integers")
    p.add_argument("--eval-split", default="test")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--peak-lr", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("count-params", help="additional-parameter breakdown")
    common(p)
    p.add_argument("--preset", choices=["whisper-large-v2"])
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--start-layer", type=int, default=0)
    p.set_defaults(fn=cmd_count_params)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    common(p)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-elems", type=int, default=48)
    p.set_defaults(fn=cmd_gradcheck)

    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
