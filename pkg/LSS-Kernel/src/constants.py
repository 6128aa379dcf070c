from __future__ import annotations
from typing import Dict, List

from pathlib import Path

# --------------------------------- #
# store layout
# --------------------------------- #


ROOT = Path(__file__).resolve().parents[1]

DEFAULT_HOME = ROOT / "lss_home"
ENV_PREFIX = "LSS_"

PROVENANCE_LOG = "provenance.log"
RESULT_MEMORY_FILE = "result_memory.tsv"
CLOCK_FILE = ".clock"
PALIMPSEST_SUFFIX = ".palimpsest"
ARTIFACT_SUFFIX = ".md"

FRONT_MATTER_DELIMITER = "---"

# keys the store owns; never part of an artifact's user front matter
SYSTEM_KEYS = ("id", "tier", "use_count", "created_step", "last_used_step")


# --------------------------------- #
# tunables (all overridable via LSS_* env vars, see config.py)
# --------------------------------- #

PROMOTION_THRESHOLD = 3
STALENESS_WINDOW = 1000

BRIEF_LIMIT = 280
READ_LIMIT = 700
TOP_K = 5
LOCAL_CONTEXT_TOKENS = 512

MEDIATION_ROUNDS = 4
MERGE_CAP = 5
PASS_THRESHOLD = 1.0

ROUND_CAP = 10
MAX_ROUNDS = 10

HIGH_WATERMARK = 0.8

DEFAULT_MAX_STEPS = 50
REMOTE_TIMEOUT = 120


# --------------------------------- #
# CLI exit codes
# --------------------------------- #

EXIT_OK = 0
EXIT_MALFORMED = 2
EXIT_INVARIANT = 3


# --------------------------------- #
# bench report
# --------------------------------- #

REPORT_COLUMNS: List[str] = [
    "query_id",
    "variant",
    "hit_at_k",
    "top1",
    "worker_tokens",
    "lens_tokens",
    "index_tokens",
    "total_tokens",
]

SUMMARY_MARKER = "#summary"


CYCLE_MARKERS: Dict[int, str] = {
    1: "--- STEP 1: Project",
    2: "--- STEP 2: Execute",
    3: "--- STEP 3: Update",
    4: "--- STEP 4: Formulate",
}

CYCLE_NAMES: Dict[int, str] = {
    0: "No phase completed",
    1: "View Projection",
    2: "Reasoner Execution",
    3: "Artifact Update",
    4: "Intent Formulation",
}
