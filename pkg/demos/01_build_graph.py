"""Merge workflow documents into one shared operation graph.

Three teams describe overlapping pipelines.  Operations that carry the same
instruction (after case/whitespace normalization) collapse into one node, so
the merged graph is smaller than the sum of its parts and every workflow's
edges survive as candidate edges.
"""

import json

from opflow import condition_on_task, merge_workflows, parse_workflow

INGEST = "Load the raw ledger rows and validate their checksums"
CLEAN = "Drop rows with missing account ids"
REPORT = "Render the summary table as markdown"


def doc(wf_id: str, name: str, description: str, must: list[str],
        ops: dict[str, str], edges: list[tuple[str, str]]) -> str:
    return json.dumps({
        "id": wf_id,
        "name": name,
        "description": description,
        "patterns": {"must": must, "should": []},
        "graph_structure": {
            "nodes": list(ops),
            "edges": [list(e) for e in edges],
        },
        "operations": {
            op_id: {"name": op_id.lower(), "instruction": instruction,
                    "patterns": {"must": [], "should": []}}
            for op_id, instruction in ops.items()
        },
    })


DOCS = [
    doc(
        "WF_DAILY", "daily ledger sweep", "Morning batch over yesterday's ledger.",
        ["ledger"],
        {
            "OP_INGEST": INGEST,
            "OP_CLEAN": CLEAN,
            "OP_TOTALS": "Sum balances per account",
            "OP_REPORT": REPORT,
        },
        [("OP_INGEST", "OP_CLEAN"), ("OP_CLEAN", "OP_TOTALS"), ("OP_TOTALS", "OP_REPORT")],
    ),
    doc(
        "WF_AUDIT", "quarterly audit", "Deep pass with anomaly flags.",
        ["audit"],
        {
            # Same instructions as WF_DAILY's ingest/clean -> same graph nodes,
            # even though this team picked different local ids (and sloppier
            # whitespace/casing on the clean step).
            "OP_LOAD": INGEST,
            "OP_SCRUB": "  drop rows with MISSING account ids ",
            "OP_FLAG": "Flag balance swings above three sigma",
            "OP_REPORT": REPORT,
        },
        [("OP_LOAD", "OP_SCRUB"), ("OP_SCRUB", "OP_FLAG"), ("OP_FLAG", "OP_REPORT")],
    ),
    doc(
        "WF_EXPORT", "partner export", "Ship cleaned rows to the partner bucket.",
        ["export"],
        {
            "OP_INGEST": INGEST,
            "OP_ENCRYPT": "Encrypt the cleaned rows with the partner key",
            "OP_UPLOAD": "Upload the archive to the partner bucket",
        },
        [("OP_INGEST", "OP_ENCRYPT"), ("OP_ENCRYPT", "OP_UPLOAD")],
    ),
]


def main() -> None:
    workflows = [parse_workflow(text) for text in DOCS]
    total_ops = sum(len(w.operations) for w in workflows)
    graph = merge_workflows(workflows)

    print(f"documents: {len(workflows)}, operations before merge: {total_ops}")
    print(f"merged graph: {len(graph.node_ids)} nodes, {len(graph.edge_list)} candidate edges")
    print()
    print("shared nodes (instruction-level dedup):")
    for node_id in graph.node_ids:
        if len(graph.node_sources.get(node_id, ())) > 1:
            folded = ", ".join(f"{wf}:{op}" for wf, op in graph.merged_from[node_id])
            print(f"  {node_id}  <-  [{folded}]")
    print()
    print("candidate edges:")
    for src, dst in graph.edge_list:
        print(f"  {src} -> {dst}")
    print()

    task = "audit the ledger and export the partner archive"
    task_graph = condition_on_task(graph, task)
    print(f"task: {task!r}")
    print(
        f"task-conditioned graph: {len(task_graph.node_ids)} nodes "
        f"({len(graph.node_ids)} ops + 1 task node), "
        f"{len(task_graph.edge_list)} edges "
        f"({len(graph.edge_list)} op edges + 2 per op)"
    )


if __name__ == "__main__":
    main()
