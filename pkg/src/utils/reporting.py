"""
Module that persists run artifacts: history tables, plots, bias-lab reports and the
manifest tying them together.
"""
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Dict, Iterable, List, Optional

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from .schemas import history_columns  # noqa: E402

logger = logging.getLogger('cli')


def file_hash(path: str) -> str:
    """sha256 of the file content"""
    digest = hashlib.sha256()
    with open(path, 'rb') as con:
        for block in iter(lambda: con.read(1 << 16), b''):
            digest.update(block)
    return digest.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec='seconds')


@dataclass
class RunManifest:
    """
    Index of the artifacts of one command invocation.

    Parameters
    ----------
    command : str
        ``run``, ``eval`` or ``biaslab``.
    out_dir : str
        Directory holding every artifact.
    config_path : str, optional
        Configuration file the command was started with.
    config_hash : str, optional
        sha256 of that file.
    """
    command: str
    out_dir: str
    config_path: Optional[str] = None
    config_hash: Optional[str] = None
    resolved_config: Dict[str, object] = field(default_factory=dict)
    artifacts: Dict[str, str] = field(default_factory=dict)
    status: str = 'running'
    diagnostic: Optional[str] = None
    started: str = field(default_factory=_now)
    finished: Optional[str] = None
    version: str = ''

    def __post_init__(self) -> None:
        if not self.version:
            from .. import __version__
            self.version = __version__
        if self.config_path is not None and self.config_hash is None:
            self.config_hash = file_hash(self.config_path)

    def add(self, name: str, path: str) -> None:
        self.artifacts[name] = path

    def write(self, status: str, diagnostic: Optional[str] = None) -> str:
        """
        Finalize and write ``manifest.json`` into ``out_dir``.

        Only artifacts that exist on disk are listed.
        """
        self.status, self.diagnostic, self.finished = status, diagnostic, _now()
        missing = [name for name, path in self.artifacts.items() if not os.path.exists(path)]
        for name in missing:
            logger.warning('artifact %s was not written and is dropped from the manifest', name)
            del self.artifacts[name]
        path = os.path.join(self.out_dir, 'manifest.json')
        with open(path, 'w') as con:
            json.dump(asdict(self), con, indent=2, default=str)
        return path


def write_history_csv(history: pd.DataFrame, path: str) -> str:
    """History table with the fixed column order ``iteration, loss, lr, rl2, wall_seconds``."""
    history.reindex(columns=history_columns).to_csv(path, index=False, float_format='%.10g')
    return path


def write_frame_csv(frame: pd.DataFrame, path: str) -> str:
    frame.to_csv(path, index=False, float_format='%.10g')
    return path


def plot_history(history: pd.DataFrame, path: str, title: str = '') -> Optional[str]:
    """
    Two panels, RL2 against iteration and against wall-clock time, log-scaled axes.

    Returns ``None`` when the history holds no RL2 values.
    """
    data = history.dropna(subset=['rl2'])
    data = data[data['rl2'] > 0]
    if data.empty:
        logger.warning('no RL2 values to plot')
        return None
    fig, (left, right) = plt.subplots(1, 2, figsize=(9, 3.5))
    left.plot(data['iteration'].clip(lower=1), data['rl2'], marker='.')
    left.set_xscale('log')
    left.set_xlabel('iteration')
    right.plot(data['wall_seconds'].clip(lower=1e-3), data['rl2'], marker='.')
    right.set_xscale('log')
    right.set_xlabel('wall time [s]')
    for ax in (left, right):
        ax.set_yscale('log')
        ax.set_ylabel('RL2')
        ax.grid(True, which='both', alpha=0.3)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, format='svg')
    plt.close(fig)
    return path


def plot_time_errors(frame: pd.DataFrame, path: str, title: str = '') -> str:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(frame['t'], frame['relative_error'], marker='.')
    ax.set_yscale('log')
    ax.set_xlabel('t')
    ax.set_ylabel('relative error')
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format='svg')
    plt.close(fig)
    return path


def write_records(records: Iterable[Dict[str, object]], path: str) -> str:
    """One JSON record per line."""
    with open(path, 'w') as con:
        for record in records:
            con.write(json.dumps(record, sort_keys=True, default=float) + '\n')
    return path


def read_records(path: str) -> List[Dict[str, object]]:
    with open(path) as con:
        return [json.loads(line) for line in con if line.strip()]
