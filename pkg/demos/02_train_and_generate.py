"""Train the edge scorer on a planted corpus, then synthesize workflows.

The corpus plants keyword-tagged routes in one shared graph: a task that
mentions a route's keyword should light up exactly that route's edges.  After
training, `generate` turns unseen task text into a workflow by scoring every
candidate edge against the task and greedily decoding a connected DAG.

The learning rate here is 1e-2 rather than the 1e-4 default: at desk scale
(500 tasks, 20 epochs, batch 64 = 160 optimizer steps) the default's total
parameter movement is far too small to fit anything — see README, "Known
acceptance failure".
"""

import numpy as np

from opflow import TrainConfig, edge_f1, generate, generate_synthetic_corpus, train


def main() -> None:
    corpus = generate_synthetic_corpus(vocab_size=20, n_tasks=600, seed=0)
    print(
        f"planted corpus: {len(corpus.graph.node_ids)} ops, "
        f"{len(corpus.graph.edge_list)} candidate edges, "
        f"{corpus.n_routes} routes keyed by {list(corpus.route_keywords)}"
    )

    train_samples = list(corpus.samples[:500])
    held_out = list(corpus.samples[500:600])
    result = train(corpus.graph, train_samples, TrainConfig(learning_rate=1e-2))
    losses = result.epoch_losses
    print(f"trained {len(train_samples)} samples, {len(losses)} epochs: "
          f"loss {losses[0]:.3f} -> {losses[-1]:.3f}")

    scores = [
        edge_f1(generate(corpus.graph, result.params, s.task_text).edges, s.workflow.edges)
        for s in held_out
    ]
    print(f"held-out edge-F1 over {len(held_out)} unseen tasks: {np.mean(scores):.3f}")
    print()

    sample = held_out[0]
    workflow = generate(corpus.graph, result.params, sample.task_text)
    print(f"task: {sample.task_text!r}")
    print(f"generated workflow {workflow.id}: {len(workflow.nodes)} ops")
    for src, dst in workflow.edges:
        print(f"  {src} -> {dst}")
    print(f"target edges matched: F1 = {edge_f1(workflow.edges, sample.workflow.edges):.3f}")


if __name__ == "__main__":
    main()
