"""``regent`` command-line workbench.

Every command reads one TOML config (``--config``) with ``--set
section.key=value`` overrides, writes into the output directory (config
``paths.output_dir``, overridden by ``$REGENT_OUTPUT_DIR`` or
``--output-dir``) and records what it read and wrote in ``manifest.json``.

Exit codes: 0 success, 2 user/configuration/input errors, 3 internal errors.
"""
from __future__ import annotations

import datetime as _dt
import hashlib
import json
import logging
import sys
from pathlib import Path

import click
import numpy as np
import torch
from filelock import FileLock, Timeout
from sklearn.linear_model import LogisticRegression

from . import evaluation
from .config import ConfigError, ExperimentConfig, load_config
from .embeddings import load_embeddings
from .entities import (
    SUPERVISED_KINDS,
    CrossEntityRanker,
    EntityLinks,
    EntityResources,
    read_entity_sets,
    write_entity_sets,
)
from .features import FeatureBuilder, collate
from .index import InvertedIndex
from .model import AblationFlags, RegentConfig, RegentModel
from .pipeline import collection_vocab, prepare, train_supervised_scorers
from .text import Vocabulary, analyze, default_stopwords, load_stopwords, tokenize_subwords
from .training import FoldPlan, TrainConfig, cross_validate, rerank, sub_seed, write_training_log
from .trec import FormatError, RankedRun, read_corpus, read_qrels, read_queries, write_jsonl

EXIT_USER = 2
EXIT_INTERNAL = 3
log = logging.getLogger("regent")


class UserError(click.ClickException):
    exit_code = EXIT_USER


class MissingArtifact(UserError):
    def __init__(self, what: str, producer: str):
        super().__init__(f"{what} not found; run `regent {producer}` first")


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class Workspace:
    """Output directory, manifest bookkeeping and cached input loading."""

    def __init__(self, cfg: ExperimentConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.root = cfg.output_dir()
        self.root.mkdir(parents=True, exist_ok=True)
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.started = _dt.datetime.now(_dt.timezone.utc).isoformat()
        self._cache: dict = {}

    # -- paths & manifest --------------------------------------------------
    def out(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def need(self, rel: str, producer: str) -> Path:
        p = self.root / rel
        if not p.exists():
            raise MissingArtifact(rel, producer)
        self.read(p)
        return p

    def read(self, path: Path) -> Path:
        self.inputs[str(path)] = sha256_file(path)
        return path

    def wrote(self, path: Path) -> None:
        self.outputs[str(path.relative_to(self.root))] = sha256_file(path)

    def finish(self) -> None:
        path = self.root / "manifest.json"
        manifest = json.loads(path.read_text()) if path.exists() else {"artifacts": {}, "commands": []}
        now = _dt.datetime.now(_dt.timezone.utc).isoformat()
        manifest["config_hash"] = self.cfg.digest()
        for rel, digest in self.outputs.items():
            manifest["artifacts"][rel] = {"sha256": digest, "command": self.command, "written_at": now}
        manifest["commands"].append({
            "command": self.command,
            "config_hash": self.cfg.digest(),
            "started": self.started,
            "finished": now,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": sorted(self.outputs),
        })
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    # -- inputs ------------------------------------------------------------
    def _path(self, name: str) -> Path:
        p = self.cfg.path(name)
        if p is None:
            raise UserError(f"paths.{name} is not configured")
        return self.read(p)

    def stopwords(self):
        if "stops" not in self._cache:
            p = self.cfg.path("stopwords")
            self._cache["stops"] = load_stopwords(self.read(p)) if p else default_stopwords()
        return self._cache["stops"]

    def corpus(self):
        return self._cache.setdefault("corpus", read_corpus(self._path("corpus")))

    def queries(self):
        return self._cache.setdefault("queries", read_queries(self._path("queries")))

    def qrels(self):
        return self._cache.setdefault("qrels", read_qrels(self._path("qrels")))

    def table(self):
        return self._cache.setdefault("table", load_embeddings(self._path("embeddings")))

    def links(self) -> EntityLinks:
        if "links" not in self._cache:
            q = self.cfg.path("query_links")
            self._cache["links"] = EntityLinks.load(self._path("doc_links"), self.read(q) if q else None)
        return self._cache["links"]

    def descriptions(self):
        p = self.cfg.path("descriptions")
        return read_corpus(self.read(p)) if p else None

    def index(self) -> InvertedIndex:
        return InvertedIndex.load(self.need("index.bin", "index"))

    def vocab(self) -> Vocabulary:
        return Vocabulary.load(self.need("vocab.txt", "index"))

    def candidates(self) -> RankedRun:
        return RankedRun.read(self.need("bm25.run", "index"))

    def fold_plan(self, create: bool = True) -> FoldPlan:
        path = self.root / "folds.json"
        if path.exists():
            plan = FoldPlan.from_dict(json.loads(self.read(path).read_text()))
            if set(plan.assignments) != set(self.queries()):
                raise UserError("folds.json does not match the configured queries; remove it to re-plan")
            return plan
        if not create:
            raise MissingArtifact("folds.json", "train")
        plan = FoldPlan.create(self.queries(), self.cfg.pipeline.n_folds, sub_seed(self.cfg.seed, "folds"))
        path.write_text(json.dumps(plan.to_dict(), indent=2, sort_keys=True) + "\n")
        self.wrote(path)
        return plan

    def model_config(self, vocab: Vocabulary, fusion=None, variant=None) -> RegentConfig:
        m = self.cfg.model
        return RegentConfig(
            vocab_size=len(vocab), entity_dim=self.table().dim, hidden_dim=m.hidden_dim,
            num_heads=m.num_heads, encoder_layers=m.encoder_layers, cross_layers=m.cross_layers,
            max_len=m.max_len, query_max_len=m.query_max_len, d_ff=m.d_ff or None,
            dropout=m.dropout, encoder_mode=m.encoder_mode, fusion=fusion or m.fusion,
            flags=AblationFlags.variant(variant or m.variant),
        )

    def train_config(self) -> TrainConfig:
        t = self.cfg.training
        return TrainConfig(t.lr, t.warmup_steps, t.batch_size, t.epochs, t.patience, t.clip_norm, self.cfg.seed)

    def resources(self, scorer: str) -> EntityResources:
        res = EntityResources(self.table(), self.links())
        if scorer in SUPERVISED_KINDS:
            plan = self.fold_plan(create=False) if (self.root / "folds.json").exists() else None
            models = {}
            for path in sorted((self.root / "entity_ranker").glob(f"{scorer}_fold*.*")) if plan else []:
                fold = int(path.stem.rsplit("fold", 1)[1])
                self.read(path)
                if scorer == "supervised_cross":
                    models[fold] = CrossEntityRanker.load(path, self.vocab())
                else:
                    models[fold] = load_logreg(path)
            if not models:
                raise UserError(
                    f"entity scorer {scorer!r} needs trained weights; run `regent train-entity-ranker` "
                    f"with pipeline.scorer={scorer} first, or pick max_sim/centroid_sim/bm25_descriptions"
                )
            res.fold_of = dict(plan.assignments)
            if scorer == "supervised_cross":
                res.cross_rankers = models
            else:
                res.logreg_models = models
        return res

    def builder(self, entity_sets) -> FeatureBuilder:
        m = self.cfg.model
        return FeatureBuilder(self.index(), self.vocab(), self.corpus(), self.queries(), self.links(),
                              entity_sets, self.table().dim, m.max_len, m.query_max_len, self.stopwords())


def save_logreg(model: LogisticRegression, path: Path) -> None:
    path.write_text(json.dumps({"coef": model.coef_.tolist(), "intercept": model.intercept_.tolist()}) + "\n")


def load_logreg(path: Path) -> LogisticRegression:
    d = json.loads(path.read_text())
    model = LogisticRegression()
    model.coef_ = np.asarray(d["coef"])
    model.intercept_ = np.asarray(d["intercept"])
    model.classes_ = np.array([0, 1])
    return model


# ---------------------------------------------------------------------------
# command plumbing


def common_options(fn):
    fn = click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE",
                      help="Override a config value (repeatable).")(fn)
    fn = click.option("--seed", type=int, default=None, help="Override the config seed.")(fn)
    fn = click.option("--output-dir", type=click.Path(file_okay=False), default=None,
                      help="Output directory (beats config and $REGENT_OUTPUT_DIR).")(fn)
    fn = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                      help="TOML experiment config.")(fn)
    return fn


def open_workspace(command: str, config_path, overrides, seed, output_dir, required=()) -> Workspace:
    extra = list(overrides)
    if seed is not None:
        extra.append(f"seed={seed}")
    cfg = load_config(config_path, extra)
    if output_dir is not None:
        cfg.output_override = str(Path(output_dir).resolve())
    cfg.validate(required)
    return Workspace(cfg, command)


def run_locked(ws: Workspace, body) -> None:
    lock = FileLock(str(ws.root / ".regent.lock"), timeout=0)
    try:
        with lock:
            body(ws)
            ws.finish()
    except Timeout:
        raise UserError(f"another regent process is writing to {ws.root}") from None


@click.group()
@click.option("-v", "--verbose", count=True, help="More logging (-v info, -vv debug).")
def main(verbose: int) -> None:
    """Relevance-guided, entity-aware re-ranking workbench."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command("index")
@common_options
def cmd_index(config_path, overrides, seed, output_dir):
    """Build the BM25 index, document cache, vocabulary and BM25 candidate run."""
    ws = open_workspace("index", config_path, overrides, seed, output_dir, ("corpus", "queries"))

    def body(ws: Workspace):
        from .index import build_index, retrieve_run
        from .text import analyze_document

        corpus, queries, stops = ws.corpus(), ws.queries(), ws.stopwords()
        index = build_index(corpus.items(), stops)
        index.save(ws.out("index.bin"))
        ws.wrote(ws.root / "index.bin")
        vp = ws.cfg.path("vocab")
        if vp is not None:
            vocab = Vocabulary.load(ws.read(vp))
        else:
            names = []
            if ws.cfg.path("embeddings") is not None:
                names = [e.replace("_", " ") for e in ws.table().entries]
            vocab = collection_vocab(corpus, queries, names)
        vocab.save(ws.out("vocab.txt"))
        ws.wrote(ws.root / "vocab.txt")
        m = ws.cfg.model
        write_jsonl((analyze_document(d, t, vocab, m.max_len, stops).to_json() for d, t in corpus.items()),
                    ws.out("documents.jsonl"))
        ws.wrote(ws.root / "documents.jsonl")
        run = retrieve_run(index, queries, ws.cfg.pipeline.depth, stops)
        run.write(ws.out("bm25.run"))
        ws.wrote(ws.root / "bm25.run")
        click.echo(f"indexed {index.doc_count} documents; {len(run)} queries retrieved")

    run_locked(ws, body)


def _entity_sets(ws: Workspace, scorer: str, rel: str) -> dict:
    links, table = ws.links(), ws.table()
    prepared = prepare(
        ws.corpus(), ws.queries(), links, table, scorer, ws.descriptions(), ws.vocab(), ws.stopwords(),
        ws.cfg.pipeline.depth, ws.cfg.pipeline.top_k_entities, ws.cfg.model.max_len,
        ws.cfg.model.query_max_len, ws.resources(scorer), ws.index(),
    )
    path = ws.out(rel)
    write_entity_sets(((q, *prepared.entity_sets[q]) for q in sorted(prepared.entity_sets)), path)
    ws.wrote(path)
    side = ws.out(rel.replace(".jsonl", ".unresolved.txt"))
    side.write_text("".join(e + "\n" for e in prepared.unresolved))
    ws.wrote(side)
    if prepared.unresolved:
        click.echo(f"warning: {len(prepared.unresolved)} unresolvable entity ids listed in {side}", err=True)
    return prepared.entity_sets


@main.command("entity-sets")
@common_options
def cmd_entity_sets(config_path, overrides, seed, output_dir):
    """Pool, score and select the query-specific entity sets."""
    ws = open_workspace("entity-sets", config_path, overrides, seed, output_dir,
                        ("corpus", "queries", "doc_links", "embeddings"))

    def body(ws: Workspace):
        sets = _entity_sets(ws, ws.cfg.pipeline.scorer, "entity_sets.jsonl")
        click.echo(f"entity sets for {len(sets)} queries ({ws.cfg.pipeline.scorer})")

    run_locked(ws, body)


@main.command("train-entity-ranker")
@common_options
def cmd_train_entity_ranker(config_path, overrides, seed, output_dir):
    """Train the per-fold supervised entity scorer named by pipeline.scorer."""
    ws = open_workspace("train-entity-ranker", config_path, overrides, seed, output_dir,
                        ("corpus", "queries", "qrels", "doc_links", "embeddings"))

    def body(ws: Workspace):
        kind = ws.cfg.pipeline.scorer
        if kind not in SUPERVISED_KINDS:
            raise UserError(f"pipeline.scorer={kind} needs no training; choose one of {SUPERVISED_KINDS}")
        ws.links().resolve(ws.table())
        res = EntityResources(ws.table(), ws.links())
        plan = ws.fold_plan()
        models = train_supervised_scorers(
            kind, ws.queries(), ws.candidates(), res, ws.qrels(), plan, ws.vocab(),
            ws.cfg.pipeline.depth, ws.cfg.seed, ws.cfg.training.entity_ranker_epochs,
        )
        for fold, model in models.items():
            if kind == "supervised_cross":
                path = ws.out(f"entity_ranker/{kind}_fold{fold}.npz")
                model.save(path)
            else:
                path = ws.out(f"entity_ranker/{kind}_fold{fold}.json")
                save_logreg(model, path)
            ws.wrote(path)
        click.echo(f"trained {len(models)} {kind} fold models")

    run_locked(ws, body)


def _load_sets(ws: Workspace, rel: str = "entity_sets.jsonl"):
    return read_entity_sets(ws.need(rel, "entity-sets"), ws.table())


def _train_cells(ws: Workspace, entity_sets, prefix: str, fusion=None, variant=None):
    """Cross-validate one configuration; writes checkpoints, logs and the out-of-fold run."""
    builder = ws.builder(entity_sets)
    plan = ws.fold_plan()
    cv = cross_validate(ws.model_config(builder.vocab, fusion, variant), builder, ws.qrels(),
                        ws.candidates(), plan, ws.train_config())
    for fold, model in cv.models.items():
        ck = ws.out(f"{prefix}checkpoints/fold{fold}.npz")
        model.save(ck, {"fold": fold, "history": cv.histories[fold]})
        ws.wrote(ck)
        lg = ws.out(f"{prefix}logs/train_fold{fold}.jsonl")
        write_training_log(cv.logs[fold], lg)
        ws.wrote(lg)
    return cv


@main.command("train")
@common_options
def cmd_train(config_path, overrides, seed, output_dir):
    """Five-fold query-level cross-validation of the re-ranker."""
    ws = open_workspace("train", config_path, overrides, seed, output_dir,
                        ("corpus", "queries", "qrels", "doc_links", "embeddings"))

    def body(ws: Workspace):
        cv = _train_cells(ws, _load_sets(ws), "")
        hist = ws.out("history.json")
        hist.write_text(json.dumps({str(k): v for k, v in cv.histories.items()}, indent=2, sort_keys=True) + "\n")
        ws.wrote(hist)
        click.echo(f"trained {len(cv.models)} fold models")

    run_locked(ws, body)


def _rerank_with_checkpoints(ws: Workspace, entity_sets, prefix: str = "") -> RankedRun:
    plan = ws.fold_plan(create=False)
    builder = ws.builder(entity_sets)
    candidates = ws.candidates()
    run = RankedRun("regent")
    for fold in range(plan.n_folds):
        model, _ = RegentModel.load(ws.need(f"{prefix}checkpoints/fold{fold}.npz", "train"))
        if model.config.vocab_size != len(builder.vocab):
            raise UserError("checkpoint vocabulary does not match vocab.txt; retrain")
        qids = [q for q in plan.queries_in(fold) if q in candidates]
        rerank(model, builder, candidates, qids, into=run)
    return run


@main.command("rerank")
@common_options
def cmd_rerank(config_path, overrides, seed, output_dir):
    """Re-score each query's BM25 candidates with its out-of-fold checkpoint."""
    ws = open_workspace("rerank", config_path, overrides, seed, output_dir,
                        ("corpus", "queries", "doc_links", "embeddings"))

    def body(ws: Workspace):
        run = _rerank_with_checkpoints(ws, _load_sets(ws))
        path = ws.out("regent.run")
        run.write(path)
        ws.wrote(path)
        click.echo(f"wrote {path}")

    run_locked(ws, body)


def _report(ws: Workspace, run: RankedRun) -> dict:
    return evaluation.evaluation_report(run, ws.qrels(), ws.candidates(), ws.index(), ws.queries(),
                                        stopword_list=ws.stopwords())


@main.command("evaluate")
@click.option("--run", "run_path", type=click.Path(dir_okay=False), default=None,
              help="Run file to evaluate (default: regent.run in the output directory).")
@common_options
def cmd_evaluate(run_path, config_path, overrides, seed, output_dir):
    """MAP / nDCG@20 / P@20 plus difficulty and rank-distribution analyses."""
    ws = open_workspace("evaluate", config_path, overrides, seed, output_dir, ("queries", "qrels"))

    def body(ws: Workspace):
        if run_path:
            run = RankedRun.read(ws.read(Path(run_path)))
        else:
            run = RankedRun.read(ws.need("regent.run", "rerank"))
        report = _report(ws, run)
        path = ws.out("report.json")
        path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        ws.wrote(path)
        for k, v in report["aggregate"].items():
            click.echo(f"{k}\t{v:.4f}")

    run_locked(ws, body)


@main.command("ablate")
@common_options
def cmd_ablate(config_path, overrides, seed, output_dir):
    """Sweep ablation variants x fusion kinds x entity scorers; one run + report per cell."""
    ws = open_workspace("ablate", config_path, overrides, seed, output_dir,
                        ("corpus", "queries", "qrels", "doc_links", "embeddings"))

    def body(ws: Workspace):
        ab = ws.cfg.ablate
        scorers = ab.scorers or [ws.cfg.pipeline.scorer]
        rows = []
        for scorer in scorers:
            sets = _entity_sets(ws, scorer, f"ablation/entity_sets.{scorer}.jsonl")
            for variant in ab.variants:
                for fusion in ab.fusions:
                    cell = f"{scorer}__{variant}__{fusion}"
                    cv = _train_cells(ws, sets, f"ablation/{cell}/", fusion, variant)
                    cv.run.tag = cell
                    rp = ws.out(f"ablation/{cell}/run.txt")
                    cv.run.write(rp)
                    ws.wrote(rp)
                    report = _report(ws, cv.run)
                    jp = ws.out(f"ablation/{cell}/report.json")
                    jp.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
                    ws.wrote(jp)
                    agg = report["aggregate"]
                    rows.append((scorer, variant, fusion, agg["map"], agg["ndcg_cut_20"], agg["P_20"]))
                    click.echo(f"{cell}\tMAP {agg['map']:.4f}")
        table = ws.out("ablation/comparison.tsv")
        with open(table, "w", encoding="utf-8") as fh:
            fh.write("scorer\tvariant\tfusion\tmap\tndcg_cut_20\tP_20\n")
            for r in rows:
                fh.write("\t".join(r[:3]) + "".join(f"\t{x:.4f}" for x in r[3:]) + "\n")
        ws.wrote(table)

    run_locked(ws, body)


def _matrix(t) -> list:
    return [] if t is None else t.detach().numpy().tolist()


@main.command("attention-dump")
@click.option("--query-id", required=True)
@click.option("--doc-id", required=True)
@common_options
def cmd_attention_dump(query_id, doc_id, config_path, overrides, seed, output_dir):
    """Write per-layer, per-head entity attention matrices for one pair as JSON."""
    ws = open_workspace("attention-dump", config_path, overrides, seed, output_dir,
                        ("corpus", "queries", "doc_links", "embeddings"))

    def body(ws: Workspace):
        candidates = ws.candidates()
        if doc_id not in candidates.doc_ids(query_id):
            raise UserError(f"({query_id}, {doc_id}) is not in the BM25 candidate set")
        plan = ws.fold_plan(create=False)
        fold = plan.assignments[query_id]
        model, _ = RegentModel.load(ws.need(f"checkpoints/fold{fold}.npz", "train"))
        builder = ws.builder(_load_sets(ws))
        pair = builder(query_id, doc_id)
        record: list = []
        model.eval()
        with torch.no_grad():
            model(collate([pair], builder.entity_dim), record)
        q_doc = tokenize_subwords(analyze(ws.queries()[query_id], ws.stopwords()), builder.vocab,
                                  builder.query_max_len)
        n_q = int(np.count_nonzero(pair.query_tokens))
        active = bool(len(pair.query_entity_ids) and len(pair.doc_entity_ids)) and not model.config.flags.disable_entities
        layers = []
        for i, rec in enumerate(record):
            gate = rec["pathways"].gate
            layers.append({
                "layer": i,
                "entity_entity": _matrix(rec["entity_entity"][0]) if rec["entity_entity"] is not None else [],
                "entity_token": (
                    [[row[: len(pair.query_entity_ids)] for row in h[:n_q]]
                     for h in _matrix(rec["entity_token"][0])]
                    if rec["entity_token"] is not None else []
                ),
                "mean_token_gate": None if gate is None else float(gate[0, :n_q].mean()),
            })
        report = {
            "query_id": query_id,
            "doc_id": doc_id,
            "fold": fold,
            "entity_pathway_active": active,
            "query_tokens": q_doc.pieces[:n_q],
            "query_entities": list(pair.query_entity_ids),
            "doc_entities": list(pair.doc_entity_ids),
            "num_heads": model.config.num_heads,
            "layers": layers,
        }
        path = ws.out(f"attention/{query_id}__{doc_id}.json")
        path.write_text(json.dumps(report, indent=2) + "\n")
        ws.wrote(path)
        click.echo(str(path))

    run_locked(ws, body)


def entry() -> None:
    """Console entry point with exit-code discipline."""
    try:
        main.main(standalone_mode=False)
    except click.exceptions.Exit as exc:
        sys.exit(exc.exit_code)
    except click.ClickException as exc:
        exc.show()
        sys.exit(exc.exit_code if exc.exit_code else EXIT_USER)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        sys.exit(EXIT_USER)
    except (ConfigError, FormatError, FileNotFoundError, ValueError) as exc:
        # malformed inputs and violated preconditions surface as ValueError
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_USER)
    except Exception as exc:  # noqa: BLE001 - last-resort reporting
        log.debug("internal error", exc_info=True)
        click.echo(f"internal error: {type(exc).__name__}: {exc}", err=True)
        sys.exit(EXIT_INTERNAL)


if __name__ == "__main__":
    entry()
