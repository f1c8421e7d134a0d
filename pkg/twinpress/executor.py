"""
Execution of the local-training leg of a federated round.

Supports sequential execution and a process pool. Either way the resulting
updates are returned in client-id order, so aggregation sees the same input
regardless of how training was scheduled.
"""

import logging
from dataclasses import dataclass
from multiprocessing import Pool
from typing import List, Optional, Sequence

import numpy as np

from twinpress.aggregation import ClientUpdate
from twinpress.forecast import ForecastModel, MinMaxStats, ParameterVector, TrainingConfig, train_local


@dataclass(frozen=True)
class TrainingJob:
    """One client's local-training request.

    Attributes:
        client_id (int): Cell id
        params (ParameterVector): Model the client starts from
        series (np.ndarray): Raw training traffic
        stats (MinMaxStats): Frozen per-cell normalization
        base_version (int): Version of `params`
    """
    client_id: int
    params: ParameterVector
    series: np.ndarray
    stats: MinMaxStats
    base_version: int = 0


def run_training_job(job: TrainingJob, cfg: TrainingConfig) -> ClientUpdate:
    model = ForecastModel.unpack(job.params)
    trained, n_samples = train_local(model, job.series, cfg, job.stats)
    return ClientUpdate(
        client_id=job.client_id,
        params=trained.pack(),
        sample_count=n_samples,
        base_version=job.base_version,
        authentic=True,
    )


def _run_job_tuple(args) -> ClientUpdate:
    job, cfg = args
    return run_training_job(job, cfg)


class LocalTrainingExecutor:
    """Runs local training jobs with a configurable strategy.

    Attributes:
        num_workers (int): Worker processes; 1 or less runs sequentially

    Methods:
        execute: Train all jobs and return their updates in client-id order
    """

    def __init__(self, num_workers: int = 1):
        self.num_workers = max(1, int(num_workers))

    @property
    def parallel(self) -> bool:
        return self.num_workers > 1

    def execute(self, jobs: Sequence[TrainingJob], cfg: TrainingConfig) -> List[ClientUpdate]:
        """Train every job.

        Args:
            jobs: Local training requests
            cfg: Shared training configuration

        Returns:
            ClientUpdates sorted by client_id

        Notes:
            - Falls back to sequential execution for a single job
            - Errors raised inside a worker propagate to the caller
        """
        ordered = sorted(jobs, key=lambda job: job.client_id)
        if self.parallel and len(ordered) > 1:
            return self._execute_parallel(ordered, cfg)
        return self._execute_sequential(ordered, cfg)

    def _execute_sequential(self, jobs: Sequence[TrainingJob], cfg: TrainingConfig) -> List[ClientUpdate]:
        return [run_training_job(job, cfg) for job in jobs]

    def _execute_parallel(self, jobs: Sequence[TrainingJob], cfg: TrainingConfig) -> List[ClientUpdate]:
        workers = min(self.num_workers, len(jobs))
        logging.debug(f"Training {len(jobs)} clients on {workers} worker processes")
        try:
            with Pool(workers) as pool:
                return pool.map(_run_job_tuple, [(job, cfg) for job in jobs])
        except Exception as e:
            logging.error(f"Parallel local training failed: {str(e)}", exc_info=True)
            raise

    def __repr__(self) -> str:
        return f"LocalTrainingExecutor(num_workers={self.num_workers})"
