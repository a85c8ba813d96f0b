"""Command line entry point: ingest -> distill-graph -> distill-mastery -> train
-> evaluate / simulate / serve-env.

Every artifact goes under the configured output directory; ``manifest.json``
there records, per command, the config hash, seeds and input file hashes.
Exit codes: 0 success, 1 runtime failure, 2 invalid usage or configuration.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, PipelineConfig, load_config, validate
from .data import (
    Dataset, SCHEMA_MAX_CONCEPTS, cooccurring_concepts, filter_and_truncate, load_dataset,
    parse_ratios, question_rates, read_dataset_dump, split_dataset, dump_dataset,
)
from .knowledge import ConceptRelationGraph, build_concept_graph
from .llm import Gateway, HTTPBackend, ResponseCache
from .mock import MockLLM
from .reasoning import DistilledDataset, build_distilled_dataset

logger = logging.getLogger("ldsim")

COMMANDS = ("ingest", "stats", "distill-graph", "distill-mastery", "train", "evaluate", "simulate", "serve-env")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


class Run:
    """Paths and shared loaders for one output directory."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs: dict[str, str] = {}

    def path(self, name: str) -> Path:
        return self.out / name

    def note_input(self, path: Path) -> None:
        if path.exists() and path.is_file():
            self.inputs[str(path)] = _sha256(path)

    # -- data
    def load_raw(self) -> Dataset:
        ds = self.cfg.dataset
        path = ds.resolved_path()
        self.note_input(path)
        concepts = ds.resolved_concepts()
        if concepts is not None:
            self.note_input(concepts)
        return load_dataset(path, ds.schema, concepts)

    def ingest(self) -> dict:
        ds = self.cfg.dataset
        raw = self.load_raw()
        kept = filter_and_truncate(raw.histories, ds.min_records, ds.max_len, ds.keep)
        parts = split_dataset(kept, parse_ratios(ds.split), ds.seed)
        names = ("train", "val", "test")[:len(parts)]
        for name, part in zip(names, parts):
            dump_dataset(raw.subset(part), self.path(f"splits/{name}.json"))
        summary = {"students_in": len(raw.histories), "students_kept": len(kept),
                   **{name: len(part) for name, part in zip(names, parts)}}
        _write_json(self.path("splits/summary.json"), summary)
        return summary

    def split(self, name: str) -> Dataset:
        p = self.path(f"splits/{name}.json")
        if not p.exists():
            logger.info("splits missing, running ingest")
            self.ingest()
        self.note_input(p)
        return read_dataset_dump(p)

    # -- llm
    def gateway(self) -> Gateway:
        gw = self.cfg.gateway
        if gw.backend == "http":
            backend = HTTPBackend(gw.base_url, gw.model, gw.api_key_env, gw.temperature)
        else:
            concepts = self.split("train").concepts
            oracle = self.cfg.oracle_path()
            edges = set()
            if oracle is not None:
                self.note_input(oracle)
                doc = json.loads(oracle.read_text(encoding="utf-8"))
                edges = {(e["start"], e["end"]) for e in doc["edges"]}
            backend = MockLLM(concepts, edges)
        cache_dir = Path(gw.cache_dir) if gw.cache_dir else self.path("llm_cache")
        return Gateway(backend, ResponseCache(cache_dir), retries=gw.retries, parallelism=gw.parallelism)

    def graph(self, required: bool = True) -> ConceptRelationGraph | None:
        p = self.path("graph.json")
        if not p.exists():
            if required:
                raise FileNotFoundError(f"{p} not found; run distill-graph first")
            return None
        self.note_input(p)
        return ConceptRelationGraph.load(p)

    def hier_graph(self):
        from .model import build_hier_graph

        train = self.split("train")
        if self.cfg.train.ablate_kd:
            return build_hier_graph(ConceptRelationGraph(train.concepts), train.questions, fully_connected=True)
        return build_hier_graph(self.graph(), train.questions)

    def question_rates(self) -> dict[str, float]:
        return question_rates(self.split("train").histories)

    def model(self):
        from .train import load_checkpoint

        p = self.path("model.pt")
        if not p.exists():
            raise FileNotFoundError(f"{p} not found; run train first")
        self.note_input(p)
        return load_checkpoint(p, self.hier_graph())

    def record(self, command: str, argv: list[str], outputs: list[str], extra: dict | None = None) -> None:
        mp = self.path("manifest.json")
        manifest = json.loads(mp.read_text(encoding="utf-8")) if mp.exists() else {"runs": {}}
        manifest["code_version"] = __version__
        manifest["runs"][command] = {
            "argv": argv,
            "config": self.cfg.to_json(),
            "config_hash": self.cfg.digest(),
            "seeds": {"split": self.cfg.dataset.seed, "distill": self.cfg.distill.seed,
                      "train": self.cfg.train.seed},
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": outputs,
            "code_version": __version__,
            **(extra or {}),
        }
        _write_json(mp, manifest)


# ----------------------------------------------------------------------------- commands

def cmd_ingest(run: Run, args) -> list[str]:
    summary = run.ingest()
    print(json.dumps(summary, sort_keys=True))
    return ["splits/train.json", "splits/val.json", "splits/test.json", "splits/summary.json"]


def cmd_stats(run: Run, args) -> list[str]:
    raw = run.load_raw()
    recs = [r for h in raw.histories for r in h.records]
    stats = {
        "students": len(raw.histories),
        "records": len(recs),
        "questions": len(raw.questions),
        "concepts": len(raw.concepts),
        "max_concepts_per_question": max((len(cs) for cs in raw.questions.values()), default=0),
        "correct_rate": sum(r.response for r in recs) / len(recs) if recs else None,
        "mean_history_length": len(recs) / len(raw.histories) if raw.histories else None,
    }
    _write_json(run.path("stats.json"), stats)
    print(json.dumps(stats, sort_keys=True))
    return ["stats.json"]


def cmd_distill_graph(run: Run, args) -> list[str]:
    train = run.split("train")
    gw = run.gateway()
    pairs = None
    if run.cfg.distill.scope == "co-occurrence":
        everyone = train.histories + run.split("val").histories + run.split("test").histories
        pairs = cooccurring_concepts(everyone)
    graph = build_concept_graph(train.concepts, gw, pairs)
    graph.save(run.path("graph.json"))
    info = {"nodes": len(graph.nodes), "edges": len(graph.edges), "backend_calls": gw.calls,
            "cache_hits": gw.cache_hits, "undetermined": graph.undetermined}
    print(json.dumps(info, sort_keys=True))
    return ["graph.json"]


def cmd_distill_mastery(run: Run, args) -> list[str]:
    if args.graph:
        graph = ConceptRelationGraph.load(args.graph)
        run.note_input(Path(args.graph))
    else:
        graph = run.graph()
    train, val = run.split("train"), run.split("val")
    gw = run.gateway()
    d = run.cfg.distill
    out = []
    for name, ds in (("train", train), ("val", val)):
        distilled = build_distilled_dataset(ds.histories, graph, gw, train.questions, d.n_pseudo, d.every, d.seed)
        distilled.save_jsonl(run.path(f"distilled_{name}.jsonl"))
        out.append(f"distilled_{name}.jsonl")
        print(json.dumps({"split": name, "real": len(distilled.records(False)),
                          "pseudo": len(distilled.records()) - len(distilled.records(False)),
                          "skipped": distilled.skipped}, sort_keys=True))
    print(json.dumps({"backend_calls": gw.calls, "cache_hits": gw.cache_hits}))
    return out


def cmd_train(run: Run, args) -> list[str]:
    from .train import load_checkpoint, make_model, save_checkpoint, stage1_train, stage2_train

    cfg = run.cfg.train
    train, val = run.split("train"), run.split("val")
    rates = question_rates(train.histories)
    hg = run.hier_graph()
    reports, outputs = {}, []
    stage1_path = run.path("model_stage1.pt")
    hyper = dataclasses.asdict(cfg)

    if args.stage in ("1", "both"):
        model = make_model(hg, cfg)
        if not cfg.ablate_rd:
            dtrain = DistilledDataset.load_jsonl(run.path("distilled_train.jsonl"))
            run.note_input(run.path("distilled_train.jsonl"))
            vpath = run.path("distilled_val.jsonl")
            dval = DistilledDataset.load_jsonl(vpath) if vpath.exists() else None
            rep = stage1_train(model, dtrain, train.histories, rates, cfg, dval, val.histories)
        else:
            rep = stage1_train(model, DistilledDataset(), train.histories, rates, cfg)
        save_checkpoint(model, stage1_path, hyper)
        reports["stage1"] = rep.to_json()
        outputs.append("model_stage1.pt")
    if args.stage in ("2", "both"):
        if cfg.ablate_rd:
            model = make_model(hg, cfg)  # never start from mastery-trained weights
        elif stage1_path.exists():
            model = load_checkpoint(stage1_path, hg)
        else:
            raise FileNotFoundError(f"{stage1_path} not found; run train --stage 1 first")
        rep = stage2_train(model, train.histories, rates, cfg, val.histories, run.path("model.pt"))
        rep.checkpoint = "model.pt"
        reports["stage2"] = rep.to_json()
        outputs.append("model.pt")
    _write_json(run.path("train_report.json"), reports)
    outputs.append("train_report.json")
    return outputs


def cmd_evaluate(run: Run, args) -> list[str]:
    from .harness import multi_step_eval, single_step_eval

    model = run.model()
    rates = run.question_rates()
    test = run.split("test").histories
    ev = run.cfg.evaluate
    if ev.mode == "single":
        report = single_step_eval(model, test, rates, last_n=args.last_n)
    else:
        report = multi_step_eval(model, test, rates, ev.n)
    doc = report.to_json()
    doc["ablations"] = {"kd": run.cfg.train.ablate_kd, "rd": run.cfg.train.ablate_rd}
    name = f"eval_{ev.mode}.json"
    if ev.mode == "single" and args.last_n is not None:
        name = f"eval_single_last{args.last_n}.json"
    _write_json(run.path(name), doc)
    print(json.dumps(doc, sort_keys=True))
    return [name]


def _all_students(run: Run) -> dict:
    out = {}
    for name in ("train", "val", "test"):
        for h in run.split(name).histories:
            out[h.student] = h
    return out


def cmd_simulate(run: Run, args) -> list[str]:
    from .harness import multi_step_simulate

    model = run.model()
    students = _all_students(run)
    if args.student not in students:
        raise KeyError(f"unknown student {args.student!r}")
    h = students[args.student]
    n = run.cfg.evaluate.n
    t = args.prefix if args.prefix is not None else max(0, len(h.records) - n)
    if args.questions:
        questions = args.questions.split(",")
    else:
        questions = [r.question for r in h.records[t:t + n]]
    res = multi_step_simulate(model, h.records[:t], questions, run.question_rates(), h.student,
                              stochastic=args.stochastic, seed=run.cfg.train.seed)
    doc = dataclasses.asdict(res)
    doc.pop("wall_time")
    name = f"simulate_{h.student}.json"
    _write_json(run.path(name), doc)
    print(json.dumps(doc, sort_keys=True))
    return [name]


def cmd_serve_env(run: Run, args) -> list[str]:
    from .harness import SimulatorEnv, serve_stdio

    if not args.stdio:
        raise ValueError("only --stdio serving is supported")
    env = SimulatorEnv(run.model(), run.question_rates(), _all_students(run),
                       stochastic=args.stochastic, seed=run.cfg.train.seed)
    serve_stdio(env, sys.stdin, sys.stdout)
    return []


HANDLERS = {
    "ingest": cmd_ingest, "stats": cmd_stats, "distill-graph": cmd_distill_graph,
    "distill-mastery": cmd_distill_mastery, "train": cmd_train, "evaluate": cmd_evaluate,
    "simulate": cmd_simulate, "serve-env": cmd_serve_env,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config (JSON)")
    common.add_argument("--output-dir", help="artifact directory")
    common.add_argument("--seed", type=int, help="seed for splitting, distillation and training")
    common.add_argument("--log-level", default="WARNING")

    parser = argparse.ArgumentParser(prog="ldsim", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("ingest", parents=[common], help="load, filter and split a QA log")
    p.add_argument("--dataset", help="CSV path (or builtin:toy)")
    p.add_argument("--schema", choices=sorted(SCHEMA_MAX_CONCEPTS))
    p.add_argument("--concepts", help="id,text CSV of concept descriptions")
    p.add_argument("--min-records", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--split", help="ratios such as 8:1:1")

    p = sub.add_parser("stats", parents=[common], help="dataset statistics")
    p.add_argument("--dataset")
    p.add_argument("--schema", choices=sorted(SCHEMA_MAX_CONCEPTS))

    p = sub.add_parser("distill-graph", parents=[common], help="build the concept prerequisite graph")
    p.add_argument("--dataset")
    p.add_argument("--backend", choices=["mock", "http"])
    p.add_argument("--scope", choices=["all", "co-occurrence"])

    p = sub.add_parser("distill-mastery", parents=[common], help="LLM mastery labels for train/val")
    p.add_argument("--graph", help="graph JSON (default: <output-dir>/graph.json)")
    p.add_argument("--backend", choices=["mock", "http"])
    p.add_argument("--n-pseudo", type=int)
    p.add_argument("--every", type=int)

    p = sub.add_parser("train", parents=[common], help="two-stage training")
    p.add_argument("--stage", choices=["1", "2", "both"], default="both")
    p.add_argument("--ablate-kd", action="store_true", help="fully connected concept graph")
    p.add_argument("--ablate-rd", action="store_true", help="skip stage 1")
    p.add_argument("--no-credit-weight", action="store_true")
    p.add_argument("--state-use-own-response", action="store_true")
    p.add_argument("--stage1-epochs", type=int)
    p.add_argument("--stage2-epochs", type=int)

    p = sub.add_parser("evaluate", parents=[common], help="single- or multi-step evaluation")
    p.add_argument("--mode", choices=["multi", "single"])
    p.add_argument("--n", type=int)
    p.add_argument("--last-n", type=int, help="single-step: only score the last N steps")
    p.add_argument("--ablate-kd", action="store_true")
    p.add_argument("--ablate-rd", action="store_true")

    p = sub.add_parser("simulate", parents=[common], help="roll out one student")
    p.add_argument("--student", required=True)
    p.add_argument("--prefix", type=int, help="number of true records to condition on")
    p.add_argument("--questions", help="comma-separated question ids")
    p.add_argument("--n", type=int)
    p.add_argument("--stochastic", action="store_true")
    p.add_argument("--ablate-kd", action="store_true")

    p = sub.add_parser("serve-env", parents=[common], help="JSON-lines environment on stdin/stdout")
    p.add_argument("--stdio", action="store_true")
    p.add_argument("--stochastic", action="store_true")
    p.add_argument("--ablate-kd", action="store_true")
    return parser


def apply_overrides(cfg: PipelineConfig, args) -> PipelineConfig:
    """Command-line flags win over the config file."""
    get = lambda name: getattr(args, name, None)  # noqa: E731
    if get("output_dir"):
        cfg.output_dir = args.output_dir
    if get("seed") is not None:
        cfg.dataset.seed = cfg.distill.seed = cfg.train.seed = args.seed
    for flag, attr in (("dataset", "path"), ("schema", "schema"), ("concepts", "concepts"),
                       ("min_records", "min_records"), ("max_len", "max_len"), ("split", "split")):
        if get(flag) is not None:
            setattr(cfg.dataset, attr, get(flag))
    if get("backend"):
        cfg.gateway.backend = args.backend
    if get("scope"):
        cfg.distill.scope = args.scope
    if get("n_pseudo") is not None:
        cfg.distill.n_pseudo = args.n_pseudo
    if get("every") is not None:
        cfg.distill.every = args.every
    if get("ablate_kd"):
        cfg.train.ablate_kd = True
    if get("ablate_rd"):
        cfg.train.ablate_rd = True
    if get("no_credit_weight"):
        cfg.train.credit_weight = False
    if get("state_use_own_response"):
        cfg.train.state_use_own_response = True
    if get("stage1_epochs") is not None:
        cfg.train.stage1_epochs = args.stage1_epochs
    if get("stage2_epochs") is not None:
        cfg.train.stage2_epochs = args.stage2_epochs
    if get("mode"):
        cfg.evaluate.mode = args.mode
    if get("n") is not None:
        cfg.evaluate.n = args.n
    validate(cfg)
    return cfg


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = apply_overrides(load_config(args.config), args)
    except ConfigError as exc:
        print(f"ldsim: invalid configuration: {exc}", file=sys.stderr)
        return 2
    try:
        run = Run(cfg)
        if args.config:
            run.note_input(Path(args.config))
        outputs = HANDLERS[args.command](run, args)
        run.record(args.command, argv, outputs)
    except Exception as exc:  # runtime failures map to exit code 1
        logger.debug("command failed", exc_info=True)
        print(f"ldsim {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0
