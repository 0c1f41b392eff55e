"""Run the ``regent`` console entry point in-process against a synthetic workspace."""
import sys

from regent.cli import entry
from regent.synthetic import make_collection

CONFIG = """\
seed = 7
[paths]
corpus = "data/corpus.jsonl"
queries = "data/queries.jsonl"
qrels = "data/qrels.txt"
doc_links = "data/doc_links.jsonl"
query_links = "data/query_links.jsonl"
embeddings = "data/entity_embeddings.txt"
descriptions = "data/entity_descriptions.jsonl"
output_dir = "out"
[model]
hidden_dim = 16
num_heads = 2
encoder_layers = 1
cross_layers = 1
max_len = 32
query_max_len = 8
[pipeline]
scorer = "max_sim"
[training]
lr = 3e-3
warmup_steps = 5
epochs = 1
[ablate]
variants = ["full", "no_entities", "no_bm25"]
"""


def regent(capsys, *args):
    """Run the console entry point in-process; returns (exit code, stdout, stderr)."""
    argv = sys.argv
    sys.argv = ["regent", *map(str, args)]
    try:
        entry()
        code = 0
    except SystemExit as exc:
        code = exc.code or 0
    finally:
        sys.argv = argv
    out = capsys.readouterr()
    return code, out.out, out.err


def make_workspace(root):
    make_collection(n_queries=5, docs_per_query=10, relevant_per_query=3, seed=2).write(root / "data")
    (root / "cfg.toml").write_text(CONFIG)
    return root / "cfg.toml"


def pipeline(capsys, cfg, *extra):
    for cmd in ("index", "entity-sets", "train", "rerank"):
        code, _, err = regent(capsys, cmd, "--config", cfg, *extra)
        assert code == 0, (cmd, err)
