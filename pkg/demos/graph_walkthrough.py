"""Build a lesion graph and an exam graph for one small case and print their structure."""

import numpy as np

from giim.graph import LesionRecord, PatientCase, build_exam_graph, build_lesion_graph
from giim.model import MhgModel

rng = np.random.default_rng(0)
case = PatientCase(
    "demo",
    [LesionRecord(f"L{j}", j % 2, [rng.normal(size=4) for _ in range(2)]) for j in range(3)],
    exam_label=1,
)

graph = build_lesion_graph(case)
print(f"lesion graph: {len(graph.nodes)} nodes")
for kind, count in graph.edge_counts().items():
    print(f"  {kind.name:<8} {count}")

exam = build_exam_graph(case)
print(f"exam graph: {len(exam.nodes)} nodes, targets {exam.targets}")

model = MhgModel(4, 2, 2, seed=0)
logits = model(graph).data
print("lesion logits:")
print(np.array2string(logits, precision=4))
