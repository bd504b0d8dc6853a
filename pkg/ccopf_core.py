import os
import json
import re
import time
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from network import sha256_hex
from nlp import ContinuationResult, SolveReport, report_from_dict, report_to_dict

logger = logging.getLogger(__name__)

__version__ = "0.1.0"

DATA_DIR = Path(__file__).resolve().parent / "data"
BUNDLED_NETWORK = DATA_DIR / "pjm5.json"
BUNDLED_CASES = DATA_DIR / "cases.json"


def find_network_path(network_dir: str) -> Optional[str]:
    """Most recently modified `*.network.json` (or `pjm*.json`) file in a directory."""
    try:
        files = os.listdir(network_dir)
    except (FileNotFoundError, NotADirectoryError, PermissionError):
        return None

    network_file_re = re.compile(r"^([\w.-]+\.network|pjm\d+)\.json$")
    network_files = []
    for f_name in files:
        if network_file_re.match(f_name):
            full_path = os.path.join(network_dir, f_name)
            if os.path.isfile(full_path):
                network_files.append(full_path)

    if not network_files:
        return None

    # Find the most recently modified file
    return max(network_files, key=os.path.getmtime)


def file_digest(path: Union[str, Path]) -> str:
    with open(path, "rb") as f:
        return sha256_hex(f.read())


def input_digests(paths: Dict[str, Optional[Union[str, Path]]]) -> Dict[str, Dict[str, str]]:
    return {
        role: {"path": str(path), "sha256": file_digest(path)}
        for role, path in paths.items()
        if path is not None and Path(path).is_file()
    }


@dataclass
class RunManifest:
    command: str
    argv: List[str]
    config: Dict[str, Any]
    inputs: Dict[str, Dict[str, str]] = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)
    version: str = __version__
    wall_time: float = 0.0
    exit_code: int = 0
    extra: Dict[str, Any] = field(default_factory=dict)


def manifest_path_for(output: Union[str, Path]) -> Path:
    output = Path(output)
    if output.is_dir():
        return output / "manifest.json"
    return output.with_suffix(".manifest.json")


def write_manifest(manifest: RunManifest, path: Union[str, Path]) -> None:
    with open(path, "w") as f:
        json.dump(asdict(manifest), f, indent=2)
        f.write("\n")


def read_manifest(path: Union[str, Path]) -> RunManifest:
    try:
        with open(path, "r") as f:
            data = json.load(f)
        return RunManifest(**data)
    except (OSError, json.JSONDecodeError, TypeError) as e:
        raise ValueError(f"{path}: not a run manifest: {e}") from e


def write_json(data: Dict[str, Any], path: Union[str, Path]) -> None:
    with open(path, "w") as f:
        json.dump(data, f, indent=2)
        f.write("\n")


def write_solution(path: Union[str, Path], report: SolveReport,
                   result: Optional[ContinuationResult] = None) -> None:
    """Writes a solution file: the certified report, plus the OA bound for cc solves.

    Timing stays out of the file so reruns produce identical bytes.
    """
    data = {
        "report": report_to_dict(report, include_timing=False),
        "lower_bound": report_to_dict(result.outer, include_timing=False) if result is not None else None,
    }
    write_json(data, path)


def read_solution(path: Union[str, Path]) -> SolveReport:
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except OSError as e:
        raise ValueError(f"{path}: cannot read solution file: {e}") from e
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}:{e.lineno}:{e.colno}: malformed solution file: {e.msg}") from e
    if not isinstance(data, dict) or not isinstance(data.get("report"), dict):
        raise ValueError(f"{path}: malformed solution file: missing 'report' object")
    report = report_from_dict(data["report"])
    if report.u_star is None:
        raise ValueError(f"{path}: malformed solution file: report has no decision")
    return report


class Stopwatch:
    def __init__(self):
        self.start = time.perf_counter()

    @property
    def elapsed(self) -> float:
        return time.perf_counter() - self.start
