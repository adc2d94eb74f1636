"""
Pointing the pipeline at a real model provider
==============================================

The same stages run against any OpenAI-compatible endpoint. The key is
read from an environment variable and never stored in the config. This
script writes a config and the commands to run it; it only contacts the
provider when ``PREMIR_RUN_LIVE=1`` is set.
"""

# %%
import os
import subprocess
import sys
from pathlib import Path

import yaml

from premir.synthetic import sample_corpus_path

work = Path("premir_live_demo")
work.mkdir(exist_ok=True)
config = {
    "corpus_manifest": str(sample_corpus_path("sample3") / "manifest.jsonl"),
    "queries": str(sample_corpus_path("sample3") / "queries.jsonl"),
    "workdir": str(work / "run"),
    "workers": 4,
    "provider": {
        "backend": "live",
        "endpoint_url": "https://api.openai.com/v1",
        "api_key_env_var": "OPENAI_API_KEY",
        "chat_model_name": "gpt-4o",
        "caption_model_name": "gpt-4o-mini",
        "textual_model_name": "gpt-4o-mini",
        "embed_model_name": "text-embedding-3-large",
        "max_parallel_requests": 4,
        "retry_limit": 3,
    },
    "gen": {"max_questions_per_source": 10},
    "retrieval": {"use_qcluster": True, "top_passages": 5},
}
path = work / "live.yaml"
path.write_text(yaml.safe_dump(config, sort_keys=False))
print(path.read_text())

# %%
steps = [["caption"], ["generate"], ["index"], ["eval"]]
for step in steps:
    print("premir", " ".join(step), "--config", path)

if os.environ.get("PREMIR_RUN_LIVE") == "1":
    for step in steps:
        subprocess.run([sys.executable, "-m", "premir.cli", *step, "--config", str(path)], check=True)
