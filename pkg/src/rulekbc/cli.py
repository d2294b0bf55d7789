"""Pipeline driver: extract, propose, train, eval, explain, rotate-train.

Every subcommand reads one INI config file, resolves overrides, and writes its
artifacts under <output_dir>/<config-hash>/ so identical config+seed reruns are
byte-identical and different configs never collide. No artifact embeds a
timestamp.
"""

import argparse
import configparser
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import evaluation, grounding, proposer, rotate, rules, subgraph, trainer
from .kb import KBError, KnowledgeBase, load_kb

logger = logging.getLogger(__name__)

_STAGE_EXTRACT, _STAGE_ROTATE, _STAGE_TRAIN = 1, 2, 3

CONFIG_EXAMPLE = """\
# rulekbc pipeline configuration; every value below is the default.

[run]
seed = 0                  ; master seed; per-stage seeds are derived from it
output_dir = runs         ; artifacts land in <output_dir>/<config-hash>/

[kb]
train = data/train.txt    ; required; TSV head<TAB>relation<TAB>tail
valid = data/valid.txt    ; optional; empty value for no validation split
test = data/test.txt      ; optional

[extract]
max_hops = 3                    ; BFS depth around each target triple
max_neighbors_per_entity = 3    ; incident-triple cap per pivot entity per hop
max_subgraphs_per_relation = 30 ; sampled target triples per relation

[similarity]
provider = trigram        ; relation-name matcher for mapping raw rule text

[proposer]
backend = offline-miner   ; offline-miner | remote-chat
endpoint =                ; chat-completions URL (remote-chat only)
model = offline           ; model name sent to the remote endpoint
request_timeout = 30.0    ; seconds per HTTP attempt
max_retries = 2           ; retries after the first failed attempt
retry_backoff = 0.5       ; seconds, multiplied by the attempt number
temperature = 0.0         ; sampling temperature for the remote model
api_key_env = RULEKBC_API_KEY ; env var holding the bearer token

[rotate]
enabled = true            ; disable to rank with rule evidence alone
dim = 64                  ; complex embedding dimensions
margin = 6.0              ; score offset gamma
negatives = 64            ; corrupted tails per positive
epochs = 100
lr = 0.001
batch_size = 256

[trainer]
lr = 0.001
weight_decay = 0.1        ; decoupled (AdamW style)
step_size = 100           ; epochs between learning-rate decays
step_gamma = 0.01         ; decay factor
patience = 30             ; early-stopping epochs on validation MRR
max_epochs = 500
uniform_weights = false   ; ablation: freeze all weights equal
"""


class CLIError(Exception):
    pass


@dataclass
class PipelineConfig:
    seed: int
    output_dir: str
    train_path: str
    valid_path: Optional[str]
    test_path: Optional[str]
    extract: subgraph.ExtractorConfig
    similarity_provider: str
    backend: proposer.ProposerBackend
    rotate_enabled: bool
    rotate: rotate.RotateConfig
    trainer: trainer.TrainerConfig
    items: List[Tuple[str, str]]  # canonical resolved settings, sorted

    def hash(self) -> str:
        digest = hashlib.sha256()
        for key, value in self.items:
            digest.update(("%s=%s\n" % (key, value)).encode())
        return digest.hexdigest()[:12]

    def run_dir(self) -> str:
        return os.path.join(self.output_dir, self.hash())


def _stage_seed(seed: int, stage: int) -> int:
    return int(np.random.SeedSequence([seed, stage]).generate_state(1)[0])


_KNOWN_KEYS = {
    "run": {"seed", "output_dir"},
    "kb": {"train", "valid", "test"},
    "extract": {"max_hops", "max_neighbors_per_entity", "max_subgraphs_per_relation"},
    "similarity": {"provider"},
    "proposer": {
        "backend",
        "endpoint",
        "model",
        "request_timeout",
        "max_retries",
        "retry_backoff",
        "temperature",
        "api_key_env",
    },
    "rotate": {"enabled", "dim", "margin", "negatives", "epochs", "lr", "batch_size"},
    "trainer": {
        "lr",
        "weight_decay",
        "step_size",
        "step_gamma",
        "patience",
        "max_epochs",
        "uniform_weights",
    },
}


def load_config(
    path: str, seed: Optional[int] = None, output_dir: Optional[str] = None
) -> PipelineConfig:
    if not os.path.exists(path):
        raise CLIError("config file %s does not exist (see config.example)" % path)
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise CLIError("cannot parse %s: %s" % (path, exc)) from exc
    for section in parser.sections():
        if section not in _KNOWN_KEYS:
            raise CLIError("unknown config section [%s]" % section)
        for key in parser[section]:
            if key not in _KNOWN_KEYS[section]:
                raise CLIError("unknown key %r in section [%s]" % (key, section))

    def get(section: str, key: str, fallback, cast):
        if not parser.has_option(section, key):
            return fallback
        raw = parser.get(section, key).strip()
        if raw == "" and cast is not str:
            return fallback
        try:
            if cast is bool:
                return parser.getboolean(section, key)
            return cast(raw)
        except ValueError as exc:
            raise CLIError("config %s.%s: %s" % (section, key, exc)) from exc

    run_seed = seed if seed is not None else get("run", "seed", 0, int)
    out_dir = output_dir if output_dir is not None else get("run", "output_dir", "runs", str)
    train_path = get("kb", "train", "", str)
    if not train_path:
        raise CLIError("config [kb] train path is required")
    valid_path = get("kb", "valid", "", str) or None
    test_path = get("kb", "test", "", str) or None

    extract_cfg = subgraph.ExtractorConfig(
        max_hops=get("extract", "max_hops", 3, int),
        max_neighbors_per_entity=get("extract", "max_neighbors_per_entity", 3, int),
        max_subgraphs_per_relation=get("extract", "max_subgraphs_per_relation", 30, int),
        rng_seed=_stage_seed(run_seed, _STAGE_EXTRACT),
    )
    provider = get("similarity", "provider", "trigram", str)
    if provider != "trigram":
        raise CLIError("unknown similarity provider %r (available: trigram)" % provider)
    backend = proposer.ProposerBackend(
        kind=get("proposer", "backend", proposer.OFFLINE, str),
        endpoint=get("proposer", "endpoint", "", str),
        model_name=get("proposer", "model", "offline", str),
        request_timeout=get("proposer", "request_timeout", 30.0, float),
        max_retries=get("proposer", "max_retries", 2, int),
        retry_backoff=get("proposer", "retry_backoff", 0.5, float),
        temperature=get("proposer", "temperature", 0.0, float),
        api_key_env=get("proposer", "api_key_env", "RULEKBC_API_KEY", str),
    )
    rotate_cfg = rotate.RotateConfig(
        dim=get("rotate", "dim", 64, int),
        margin=get("rotate", "margin", 6.0, float),
        negatives=get("rotate", "negatives", 64, int),
        epochs=get("rotate", "epochs", 100, int),
        lr=get("rotate", "lr", 1e-3, float),
        batch_size=get("rotate", "batch_size", 256, int),
        seed=_stage_seed(run_seed, _STAGE_ROTATE),
    )
    trainer_cfg = trainer.TrainerConfig(
        lr=get("trainer", "lr", 1e-3, float),
        weight_decay=get("trainer", "weight_decay", 0.1, float),
        step_size=get("trainer", "step_size", 100, int),
        step_gamma=get("trainer", "step_gamma", 0.01, float),
        patience=get("trainer", "patience", 30, int),
        max_epochs=get("trainer", "max_epochs", 500, int),
        seed=_stage_seed(run_seed, _STAGE_TRAIN),
        uniform_weights=get("trainer", "uniform_weights", False, bool),
    )
    rotate_enabled = get("rotate", "enabled", True, bool)

    items = sorted(
        [
            ("run.seed", str(run_seed)),
            ("run.output_dir", out_dir),
            ("kb.train", train_path),
            ("kb.valid", valid_path or ""),
            ("kb.test", test_path or ""),
            ("extract.max_hops", str(extract_cfg.max_hops)),
            ("extract.max_neighbors_per_entity", str(extract_cfg.max_neighbors_per_entity)),
            ("extract.max_subgraphs_per_relation", str(extract_cfg.max_subgraphs_per_relation)),
            ("similarity.provider", provider),
            ("proposer.backend", backend.kind),
            ("proposer.endpoint", backend.endpoint),
            ("proposer.model", backend.model_name),
            ("proposer.request_timeout", repr(backend.request_timeout)),
            ("proposer.max_retries", str(backend.max_retries)),
            ("proposer.retry_backoff", repr(backend.retry_backoff)),
            ("proposer.temperature", repr(backend.temperature)),
            ("proposer.api_key_env", backend.api_key_env),
            ("rotate.enabled", str(rotate_enabled)),
            ("rotate.dim", str(rotate_cfg.dim)),
            ("rotate.margin", repr(rotate_cfg.margin)),
            ("rotate.negatives", str(rotate_cfg.negatives)),
            ("rotate.epochs", str(rotate_cfg.epochs)),
            ("rotate.lr", repr(rotate_cfg.lr)),
            ("rotate.batch_size", str(rotate_cfg.batch_size)),
            ("trainer.lr", repr(trainer_cfg.lr)),
            ("trainer.weight_decay", repr(trainer_cfg.weight_decay)),
            ("trainer.step_size", str(trainer_cfg.step_size)),
            ("trainer.step_gamma", repr(trainer_cfg.step_gamma)),
            ("trainer.patience", str(trainer_cfg.patience)),
            ("trainer.max_epochs", str(trainer_cfg.max_epochs)),
            ("trainer.uniform_weights", str(trainer_cfg.uniform_weights)),
        ]
    )
    return PipelineConfig(
        seed=run_seed,
        output_dir=out_dir,
        train_path=train_path,
        valid_path=valid_path,
        test_path=test_path,
        extract=extract_cfg,
        similarity_provider=provider,
        backend=backend,
        rotate_enabled=rotate_enabled,
        rotate=rotate_cfg,
        trainer=trainer_cfg,
        items=items,
    )


def _prepare_run_dir(cfg: PipelineConfig) -> str:
    run = cfg.run_dir()
    os.makedirs(run, exist_ok=True)
    with open(os.path.join(run, "config.example"), "w", encoding="utf-8") as fh:
        fh.write(CONFIG_EXAMPLE)
    with open(os.path.join(run, "config.resolved"), "w", encoding="utf-8") as fh:
        for key, value in cfg.items:
            fh.write("%s = %s\n" % (key, value))
    print("run artifacts: %s" % run)
    return run


def _load_kb(cfg: PipelineConfig) -> KnowledgeBase:
    return load_kb(cfg.train_path, cfg.valid_path, cfg.test_path)


def _subgraph_path(run: str, relation: int) -> str:
    return os.path.join(run, "subgraphs", "relation_%03d.txt" % relation)


def cmd_extract(cfg: PipelineConfig) -> int:
    run = _prepare_run_dir(cfg)
    kb = _load_kb(cfg)
    os.makedirs(os.path.join(run, "subgraphs"), exist_ok=True)
    for rel in range(kb.num_relations):
        targets = subgraph.sample_targets(
            kb, rel, cfg.extract.max_subgraphs_per_relation, cfg.extract.rng_seed
        )
        sgs = [subgraph.extract_subgraph(kb, t, cfg.extract) for t in targets]
        with open(_subgraph_path(run, rel), "w", encoding="utf-8") as fh:
            subgraph.save_subgraphs(fh, kb, sgs)
        sizes = [len(s) for s in sgs]
        print(
            "relation %-30s targets=%-3d mean_size=%.1f"
            % (kb.relation_name(rel), len(sgs), float(np.mean(sizes)) if sizes else 0.0)
        )
    return 0


def cmd_propose(cfg: PipelineConfig) -> int:
    run = _prepare_run_dir(cfg)
    kb = _load_kb(cfg)
    provider = rules.TrigramSimilarity()
    os.makedirs(os.path.join(run, "rules"), exist_ok=True)
    os.makedirs(os.path.join(run, "proposals"), exist_ok=True)
    all_records: List[proposer.ProposalRecord] = []
    kept: List[rules.Rule] = []
    totals = {"lines": 0, "parse_rejected": 0, "stage1_rejected": 0, "mapped": 0, "unclassified": 0}
    for rel in range(kb.num_relations):
        path = _subgraph_path(run, rel)
        if not os.path.exists(path):
            raise CLIError("no subgraph dump for relation %r; run extract first" % kb.relation_name(rel))
        with open(path, "r", encoding="utf-8") as fh:
            sgs = list(subgraph.load_subgraphs(fh, kb))
        records = proposer.propose(cfg.backend, kb, sgs)
        all_records.extend(records)
        target_name = kb.relation_name(rel)
        stats = dict.fromkeys(("lines", "parse_rejected", "stage1_rejected", "mapped", "unclassified"), 0)
        for rec in records:
            stats["lines"] += len(rec.parsed_rules) + len(rec.rejected)
            stats["parse_rejected"] += len(rec.rejected)
            for rule in rec.parsed_rules:
                reason = rules.filter_stage1(rule, target_name)
                if reason is not None:
                    stats["stage1_rejected"] += 1
                    continue
                mapped = rules.map_relations(rule, kb, provider)
                classified = rules.classify_case(mapped)
                stats["mapped"] += 1
                if classified.case == rules.UNCLASSIFIED:
                    stats["unclassified"] += 1
                kept.append(classified)
        for key in totals:
            totals[key] += stats[key]
        if stats["lines"]:
            print(
                "relation %-30s lines=%-4d parse_rejected=%-4d stage1_rejected=%-4d "
                "mapped=%-4d unclassified=%d"
                % (
                    target_name,
                    stats["lines"],
                    stats["parse_rejected"],
                    stats["stage1_rejected"],
                    stats["mapped"],
                    stats["unclassified"],
                )
            )
    unique = rules.dedup(kept)
    proposer.save_proposals(os.path.join(run, "proposals", "records.jsonl"), all_records, kb)
    rules.save_rules(os.path.join(run, "rules", "rules.jsonl"), unique, kb)
    print(
        "totals: lines=%d parse_rejected=%d stage1_rejected=%d mapped=%d "
        "unclassified=%d unique=%d"
        % (
            totals["lines"],
            totals["parse_rejected"],
            totals["stage1_rejected"],
            totals["mapped"],
            totals["unclassified"],
            len(unique),
        )
    )
    return 0


def _rotate_checkpoint(run: str) -> str:
    return os.path.join(run, "checkpoints", "rotate.bin")


def _ensure_rotate(cfg: PipelineConfig, run: str, kb: KnowledgeBase, train_if_missing: bool):
    if not cfg.rotate_enabled:
        return None
    path = _rotate_checkpoint(run)
    if os.path.exists(path):
        model = rotate.load_embeddings(path)
        if model.num_entities != kb.num_entities or model.num_relations != kb.num_relations:
            raise CLIError("embedding checkpoint %s does not match the KB vocabulary" % path)
        return model
    if not train_if_missing:
        raise CLIError("no embedding checkpoint at %s; run rotate-train or train first" % path)
    model, trace = rotate.train_embeddings(kb, cfg.rotate)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    rotate.save_embeddings(path, model)
    _write_json(os.path.join(run, "reports", "rotate_trace.json"), trace)
    print("trained embeddings: %d epochs, final loss %.4f" % (len(trace), trace[-1] if trace else 0.0))
    return model


def _write_json(path: str, payload) -> None:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_rule_file(run: str, kb: KnowledgeBase) -> List[rules.Rule]:
    path = os.path.join(run, "rules", "rules.jsonl")
    if not os.path.exists(path):
        raise CLIError("no rule file at %s; run propose first" % path)
    return rules.load_rules(path, kb)


def cmd_rotate_train(cfg: PipelineConfig) -> int:
    run = _prepare_run_dir(cfg)
    if not cfg.rotate_enabled:
        raise CLIError("rotate.enabled is false; nothing to train")
    kb = _load_kb(cfg)
    path = _rotate_checkpoint(run)
    if os.path.exists(path):
        os.unlink(path)
    _ensure_rotate(cfg, run, kb, train_if_missing=True)
    print("embedding checkpoint: %s" % path)
    return 0


def cmd_train(cfg: PipelineConfig, resume: bool = False) -> int:
    run = _prepare_run_dir(cfg)
    kb = _load_kb(cfg)
    learned = _load_rule_file(run, kb)
    groundings = grounding.ground_all(kb, learned, cache_dir=os.path.join(run, "groundings"))
    total_grounded = sum(len(v) for v in groundings.values())
    if total_grounded == 0 and not cfg.rotate_enabled:
        raise CLIError("no classifiable rules and embeddings are disabled; nothing to train")
    rotate_model = _ensure_rotate(cfg, run, kb, train_if_missing=True)
    params_path = os.path.join(run, "checkpoints", "params.json")
    initial = None
    if resume:
        if not os.path.exists(params_path):
            raise CLIError("cannot resume: no checkpoint at %s" % params_path)
        initial = trainer.load_params(params_path, kb)
    params, traces = trainer.train(kb, groundings, rotate_model, cfg.trainer, initial=initial)
    os.makedirs(os.path.dirname(params_path), exist_ok=True)
    trainer.save_params(params_path, params, kb)
    _write_json(os.path.join(run, "reports", "train_trace.json"), traces)
    trained = sum(1 for t in traces.values() if t["loss"])
    print(
        "trained %d relations (%d grounded rules); checkpoint: %s"
        % (trained, total_grounded, params_path)
    )
    return 0


def cmd_eval(
    cfg: PipelineConfig,
    split: str = "test",
    annotations_path: Optional[str] = None,
    emit_csv: bool = False,
) -> int:
    run = _prepare_run_dir(cfg)
    kb = _load_kb(cfg)
    learned = _load_rule_file(run, kb)
    groundings = grounding.ground_all(kb, learned, cache_dir=os.path.join(run, "groundings"))
    rotate_model = _ensure_rotate(cfg, run, kb, train_if_missing=False)
    params_path = os.path.join(run, "checkpoints", "params.json")
    if not os.path.exists(params_path):
        raise CLIError("no parameter checkpoint at %s; run train first" % params_path)
    params = trainer.load_params(params_path, kb)
    report = evaluation.evaluate_model(params, kb, groundings, rotate_model, split=split)
    print(report.render_text())
    _write_json(os.path.join(run, "reports", "metrics_%s.json" % split), report.to_dict())
    with open(os.path.join(run, "reports", "metrics_%s.txt" % split), "w", encoding="utf-8") as fh:
        fh.write(report.render_text() + "\n")
    if emit_csv:
        csv_path = os.path.join(run, "reports", "metrics_%s.csv" % split)
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "value"])
            writer.writerow(["queries", report.query_count])
            writer.writerow(["mr", "%.6f" % report.mr])
            writer.writerow(["mrr", "%.6f" % report.mrr])
            for k in sorted(report.hits):
                writer.writerow(["hits@%d" % k, "%.6f" % report.hits[k]])
    if annotations_path:
        annotations = evaluation.load_annotations(annotations_path)
        quality = evaluation.compute_rule_quality(learned, annotations, kb)
        print(quality.render_text())
        _write_json(os.path.join(run, "reports", "rule_quality.json"), quality.to_dict())
    return 0


def _nearest_names(name: str, candidates: List[str], limit: int = 5) -> List[str]:
    provider = rules.TrigramSimilarity()
    scored = sorted(candidates, key=lambda c: (-provider.score(name, c), c))
    return scored[:limit]


def cmd_explain(cfg: PipelineConfig, head_name: str, relation_name: str, top_k: int = 10) -> int:
    run = _prepare_run_dir(cfg)
    kb = _load_kb(cfg)
    if head_name not in kb.entities:
        print(
            "unknown entity %r; nearest names: %s"
            % (head_name, ", ".join(_nearest_names(head_name, kb.entities.names))),
            file=sys.stderr,
        )
        return 2
    if relation_name not in kb.relations:
        print(
            "unknown relation %r; nearest names: %s"
            % (relation_name, ", ".join(_nearest_names(relation_name, kb.relations.names))),
            file=sys.stderr,
        )
        return 2
    head = kb.entities.id(head_name)
    relation = kb.relations.id(relation_name)
    learned = _load_rule_file(run, kb)
    groundings = grounding.ground_all(kb, learned, cache_dir=os.path.join(run, "groundings"))
    rotate_model = _ensure_rotate(cfg, run, kb, train_if_missing=False)
    params_path = os.path.join(run, "checkpoints", "params.json")
    if not os.path.exists(params_path):
        raise CLIError("no parameter checkpoint at %s; run train first" % params_path)
    params = trainer.load_params(params_path, kb)
    result = trainer.rank(params, kb, groundings, rotate_model, head, relation, top_k=top_k)
    print("query: (%s, %s, ?)" % (head_name, relation_name))
    for pos, entry in enumerate(result.entries, start=1):
        print("%2d. %-30s score=%.6f" % (pos, kb.entity_name(entry.tail), entry.score))
        for label, value in sorted(entry.contributions, key=lambda lv: -abs(lv[1])):
            print("      %+.6f  %s" % (value, label))
            if label != "embedding":
                paths = grounding.witness_paths(
                    kb, _rule_by_text(learned, label, kb), head, entry.tail, limit=2
                )
                for p in paths:
                    shown = " ; ".join(
                        "(%s, %s, %s)"
                        % (kb.entity_name(a), kb.relation_name(r), kb.entity_name(b))
                        for a, r, b in p
                    )
                    print("                 via %s" % shown)
    return 0


def _rule_by_text(learned: List[rules.Rule], text: str, kb: KnowledgeBase) -> rules.Rule:
    for rule in learned:
        if rules.format_rule(rule, kb) == text:
            return rule
    raise CLIError("rule %r not found in the rule file" % text)


def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rulekbc",
        description="Knowledge-base completion with learned logic rules and rotation embeddings.",
    )
    parser.add_argument("--config", required=True, help="path to the INI pipeline config")
    parser.add_argument("--seed", type=int, default=None, help="override [run] seed")
    parser.add_argument("--output-dir", default=None, help="override [run] output_dir")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("extract", help="sample targets and dump subgraphs per relation")
    sub.add_parser("propose", help="generate, filter and classify candidate rules")
    train_p = sub.add_parser("train", help="ground rules and fit significance weights")
    train_p.add_argument("--resume", action="store_true", help="continue from the checkpoint")
    eval_p = sub.add_parser("eval", help="filtered ranking metrics on a split")
    eval_p.add_argument("--split", choices=("valid", "test"), default="test")
    eval_p.add_argument("--rules-annotations", default=None, help="path score annotations file")
    eval_p.add_argument("--emit-csv", action="store_true")
    explain_p = sub.add_parser("explain", help="rank tails for one query with attributions")
    explain_p.add_argument("head", help="entity name")
    explain_p.add_argument("relation", help="relation name")
    explain_p.add_argument("--top", type=int, default=10)
    sub.add_parser("rotate-train", help="pretrain the frozen embedding model")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_arg_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = load_config(args.config, seed=args.seed, output_dir=args.output_dir)
        if args.command == "extract":
            return cmd_extract(cfg)
        if args.command == "propose":
            return cmd_propose(cfg)
        if args.command == "train":
            return cmd_train(cfg, resume=args.resume)
        if args.command == "eval":
            return cmd_eval(
                cfg,
                split=args.split,
                annotations_path=args.rules_annotations,
                emit_csv=args.emit_csv,
            )
        if args.command == "explain":
            return cmd_explain(cfg, args.head, args.relation, top_k=args.top)
        if args.command == "rotate-train":
            return cmd_rotate_train(cfg)
        raise CLIError("unhandled command %r" % args.command)
    except (CLIError, KBError, proposer.ProposerError, ValueError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
