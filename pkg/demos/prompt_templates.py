"""Show one synthetic patient in each prompt template.

Run:  python3 demos/prompt_templates.py
"""

from mddllm.promptgen import INSTRUCTION, build_sft, mask_features, render
from mddllm.schema import default_schema
from mddllm.synth import preset, synth_cohort

schema = default_schema()
cohort = synth_cohort(preset("ukb", 50), seed=0, schema=schema)
record = cohort.records[0]

print("instruction:", INSTRUCTION)
print()
for template in ("list", "text", "narrative"):
    # without a chat client the narrative template uses its deterministic offline fallback
    print(f"[{template}]")
    print(render(record, schema, template))
    print()

sft = build_sft(record, schema, "text")
print("expected answer:", sft.output)
print()

print("[text, 40% of features retained]")
print(render(mask_features(record, schema, 0.4, seed=1), schema, "text"))
