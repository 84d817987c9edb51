"""Federation orchestration: initial benchmarking and trading rounds.

Benchmarking pretrains every party from a shared initial parameter
vector, runs the publish/label/vote cycle once to seed credibility
ledgers, bans majority-flagged parties, initializes points, and commits
the genesis block.

Each collaborative round then proceeds in barrier-synchronized phases:
local training; budget and per-peer allocation; a block of DOWNLOAD
requests; masking, encoding, pad encryption and onion wrapping of every
requested update; a block of UPLOAD commitments (which settle the point
transfers); aggregate decryption and parameter updates; a fresh mutual
evaluation that blends into the credibility ledgers; and a ban vote.
A ledger rejection aborts the round atomically: party state, accounts,
ledgers, and the chain itself are rolled back to the round boundary.

All randomness flows from three named seeds (data, model, sampling)
through purpose-tagged child streams, so identical configurations yield
byte-identical chain logs.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from . import crypto, economy, evaluation, ledger, metrics
from .datasets import (
    Dataset,
    draw_shards,
    equal_shard_sizes,
    idx_bytes,
    random_partition_sizes,
)
from .learner import (
    GradientVector,
    MlpClassifier,
    apply_update,
    evaluate,
    predict_labels,
    select_largest,
    train_local,
)

INPUT_FEATURES = 1024
OUTPUT_CLASSES = 10

# Purpose tags for seed derivation; every stream is keyed by one of
# these plus the relevant (round, party) coordinates.
_P_KEYS = 1
_P_VALIDATOR = 2
_P_DEALER = 3
_P_SHARING = 4
_P_PUBLISH = 5
_P_TRAIN = 6
_P_ONION = 7
_P_ADVERSARY = 8
_P_POOL = 9


class FederationAbort(RuntimeError):
    """Fewer than two credible parties remain; the run cannot continue."""


class RoundAborted(RuntimeError):
    """A ledger rejection rolled the round back to its starting state."""


def child_rng(*entropy: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(entropy)))


@dataclass
class ExperimentConfig:
    """Declarative description of one federation run."""

    setting: int = 1
    n_parties: int = 4
    rounds: int = 100
    shard_size: int = 600  # settings 1 and 2: examples per party
    total_examples: Optional[int] = None  # setting 3: pool split at random
    sharing_level: float = 0.1  # settings 1 and 3
    sharing_range: Tuple[float, float] = (0.1, 0.5)  # setting 2
    epochs_per_round: int = 1
    batch_size: int = 1
    learning_rate: float = 0.001
    lr_decay: float = 1e-7
    pretrain_epochs: int = 10
    hidden_sizes: Tuple[int, ...] = (128,)
    noise_scale: float = 0.1
    credibility_threshold: Optional[float] = None  # None: 2/(3(|C|-1))
    scale_bits: int = 16
    clip: float = 32.0
    encrypt: bool = True
    free_rider: Optional[int] = None
    seed_data: int = 0
    seed_model: int = 0
    seed_sampling: int = 0

    @property
    def architecture(self) -> Tuple[int, ...]:
        return (INPUT_FEATURES, *self.hidden_sizes, OUTPUT_CLASSES)

    def validate(self) -> None:
        if self.setting not in (1, 2, 3):
            raise ValueError(f"unknown setting {self.setting}")
        if self.n_parties < 2:
            raise ValueError("need at least 2 parties")
        if self.free_rider is not None and not (
            0 <= self.free_rider < self.n_parties
        ):
            raise ValueError("free rider index out of range")
        if self.rounds < 0:
            raise ValueError("rounds must be non-negative")

    def to_dict(self) -> dict:
        out = {}
        for key, value in self.__dict__.items():
            out[key] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(raw)
        for key in ("hidden_sizes", "sharing_range"):
            if key in kwargs and kwargs[key] is not None:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


@dataclass
class PartyState:
    id: int
    model: MlpClassifier
    shard: Dataset
    publisher: evaluation.SamplePublisher
    keys: crypto.KeyBundle
    sharing_level: float
    published_count: int
    claimed_data_size: int
    alive: bool = True
    is_free_rider: bool = False
    credibility: Optional[evaluation.CredibilityLedger] = None
    account: Optional[economy.PointsAccount] = None
    standalone_accuracy: Optional[float] = None


@dataclass
class RoundReport:
    round_id: int
    accuracies: Dict[int, float]
    balances: Dict[int, int]
    credibility: Dict[int, Dict[int, float]]
    banned: List[int]
    ledger_height: int
    circulating_points: int
    frozen_points: int


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    standalone_accuracies: Dict[int, float]
    best_accuracies: Dict[int, float]  # best across collaborative rounds
    final_accuracies: Dict[int, float]  # max(standalone, collaborative best)
    sharing_levels: Dict[int, float]
    reports: List[RoundReport]
    fairness: metrics.FairnessReport
    chain: ledger.Chain
    banned: Dict[int, int]  # party -> round of removal (0 = benchmarking)


# ---------------------------------------------------------------------------
# Federation
# ---------------------------------------------------------------------------


class Federation:
    """Mutable simulation state for one run."""

    def __init__(self, config: ExperimentConfig, train: Dataset, test: Dataset):
        config.validate()
        self.config = config
        self.test = test
        self.codec = crypto.FixedPointCodec(scale_bits=config.scale_bits)
        self.validator_keys = crypto.KeyBundle.generate(
            child_rng(config.seed_sampling, _P_VALIDATOR)
        )
        dealer_seed = child_rng(config.seed_sampling, _P_DEALER).bytes(32)
        self.dealer = crypto.KeystreamDealer(dealer_seed, modulus=self.codec.modulus)
        self.chain: Optional[ledger.Chain] = None
        self.genesis_points = 0
        self.banned_round: Dict[int, int] = {}
        self._request_counter = 0
        self.parties = self._build_parties(config, train)
        for party in self.parties.values():
            self.dealer.register(party.id, party.keys.pad_seed)
        # Per-party training streams persist across rounds.
        self.train_rngs = {
            pid: child_rng(config.seed_model, _P_TRAIN, pid) for pid in self.parties
        }

    # -- construction -------------------------------------------------------

    def _build_parties(
        self, config: ExperimentConfig, train: Dataset
    ) -> Dict[int, PartyState]:
        honest_ids = [
            pid for pid in range(config.n_parties) if pid != config.free_rider
        ]
        if config.setting == 3:
            total = config.total_examples or config.shard_size * len(honest_ids)
            sizes = random_partition_sizes(
                total, len(honest_ids), child_rng(config.seed_data, 1)
            )
        else:
            sizes = equal_shard_sizes(len(honest_ids), config.shard_size)
        shards = draw_shards(train, sizes, child_rng(config.seed_data, 0))

        sharing_rng = child_rng(config.seed_sampling, _P_SHARING)
        levels: Dict[int, float] = {}
        for pid in range(config.n_parties):
            if config.setting == 2:
                low, high = config.sharing_range
                levels[pid] = float(sharing_rng.uniform(low, high))
            else:
                levels[pid] = config.sharing_level

        base_model = MlpClassifier(
            config.architecture, rng=child_rng(config.seed_model, 0)
        )

        parties: Dict[int, PartyState] = {}
        for pid in range(config.n_parties):
            free_rider = pid == config.free_rider
            if free_rider:
                shard = Dataset(
                    np.zeros((0, INPUT_FEATURES)), np.zeros(0, dtype=np.int64)
                )
                claimed = config.shard_size
                pool = child_rng(config.seed_sampling, _P_ADVERSARY, _P_POOL, pid).normal(
                    0.0, 1.0, (claimed, INPUT_FEATURES)
                )
            else:
                shard = shards[honest_ids.index(pid)]
                claimed = len(shard)
                pool = shard.images
            published = int(round(levels[pid] * claimed))
            parties[pid] = PartyState(
                id=pid,
                model=base_model.clone(),
                shard=shard,
                publisher=evaluation.SamplePublisher(pool, config.noise_scale),
                keys=crypto.KeyBundle.generate(
                    child_rng(config.seed_sampling, _P_KEYS, pid)
                ),
                sharing_level=published / claimed,  # lambda = u / |D| exactly
                published_count=published,
                claimed_data_size=claimed,
                is_free_rider=free_rider,
            )
        return parties

    # -- small helpers ------------------------------------------------------

    @property
    def n_params(self) -> int:
        return next(iter(self.parties.values())).model.n_params

    def alive_ids(self) -> List[int]:
        return sorted(p.id for p in self.parties.values() if p.alive)

    def next_request_id(self) -> int:
        self._request_counter += 1
        return self._request_counter

    def threshold(self, credible_count: int) -> float:
        if self.config.credibility_threshold is not None:
            return self.config.credibility_threshold
        return evaluation.compute_cth(credible_count)

    def _publish_batch(self, party: PartyState, round_tag: int) -> np.ndarray:
        rng = child_rng(
            self.config.seed_sampling, _P_PUBLISH, round_tag, party.id
        )
        return party.publisher.publish(party.published_count, rng)

    def _label_batch(
        self, labeler: PartyState, batch: np.ndarray, round_tag: int, publisher: int
    ) -> np.ndarray:
        if labeler.is_free_rider:
            rng = child_rng(
                self.config.seed_sampling, _P_ADVERSARY, round_tag, publisher,
                labeler.id,
            )
            return rng.integers(0, OUTPUT_CLASSES, batch.shape[0]).astype(np.int64)
        return predict_labels(labeler.model, batch)

    def _mutual_evaluation(
        self, round_tag: int
    ) -> Dict[int, evaluation.LabelMatrix]:
        """Publish/cross-label once; returns one label matrix per publisher."""
        alive = self.alive_ids()
        matrices: Dict[int, evaluation.LabelMatrix] = {}
        for pid in alive:
            publisher = self.parties[pid]
            batch = self._publish_batch(publisher, round_tag)
            columns = [
                self._label_batch(self.parties[peer], batch, round_tag, pid)
                for peer in alive
            ]
            matrices[pid] = evaluation.LabelMatrix(
                np.column_stack(columns) if batch.shape[0] else
                np.zeros((0, len(alive)), dtype=np.int64),
                tuple(alive),
            )
        return matrices

    def _ban_vote_loop(self, round_id: int) -> List[int]:
        """Flag, vote, remove, renormalize until stable; returns removals."""
        removed_total: List[int] = []
        while True:
            alive = self.alive_ids()
            if len(alive) < 2:
                break
            threshold = self.threshold(len(alive))
            reports = {
                pid: self.parties[pid].credibility.flagged_peers(threshold)
                for pid in alive
            }
            survivors, removed = evaluation.collect_reports_and_ban(reports, alive)
            if not removed:
                break
            for loser in sorted(removed):
                self.parties[loser].alive = False
                self.banned_round[loser] = round_id
                removed_total.append(loser)
            for pid in survivors:
                for loser in removed:
                    self.parties[pid].credibility.drop_peer(loser)
        return removed_total

    def _commit_bans(self, removed: Sequence[int], round_id: int) -> None:
        if not removed or self.chain is None:
            return
        txs = [
            ledger.signed_transaction(
                ledger.TxKind.BAN,
                ledger.VALIDATOR_ID,
                ledger.BanBody(pid, round_id),
                self.validator_keys.signing_key,
            )
            for pid in sorted(removed)
        ]
        self.chain.append_block(txs)

    def _assert_conservation(self) -> None:
        assert self.chain is not None
        circulating = self.chain.circulating_total()
        frozen = self.chain.frozen_total()
        if circulating + frozen != self.genesis_points:
            raise AssertionError(
                f"points leaked: {circulating}+{frozen} != {self.genesis_points}"
            )
        for pid in self.alive_ids():
            mirror = self.parties[pid].account.balance
            on_chain = self.chain.balances[pid]
            if mirror != on_chain:
                raise AssertionError(
                    f"balance mirror diverged for {pid}: {mirror} vs {on_chain}"
                )

    # -- snapshots for round atomicity --------------------------------------

    def _snapshot(self) -> dict:
        return {
            "params": {
                pid: p.model.get_params() for pid, p in self.parties.items()
            },
            "steps": {pid: p.model.step_count for pid, p in self.parties.items()},
            "accounts": copy.deepcopy(
                {pid: p.account for pid, p in self.parties.items()}
            ),
            "ledgers": copy.deepcopy(
                {pid: p.credibility for pid, p in self.parties.items()}
            ),
            "alive": {pid: p.alive for pid, p in self.parties.items()},
            "banned_round": dict(self.banned_round),
            "chain_height": self.chain.height if self.chain else 0,
            "request_counter": self._request_counter,
            "train_rngs": copy.deepcopy(self.train_rngs),
        }

    def _restore(self, snap: dict) -> None:
        for pid, party in self.parties.items():
            party.model.set_params(snap["params"][pid])
            party.model.step_count = snap["steps"][pid]
            party.account = snap["accounts"][pid]
            party.credibility = snap["ledgers"][pid]
            party.alive = snap["alive"][pid]
        self.banned_round = snap["banned_round"]
        self._request_counter = snap["request_counter"]
        self.train_rngs = snap["train_rngs"]
        if self.chain is not None:
            self.chain.truncate(snap["chain_height"])


# ---------------------------------------------------------------------------
# Benchmarking (credibility and points initialization, genesis commit)
# ---------------------------------------------------------------------------

BENCHMARK_TAG = 0  # round tag reserved for the initialization exchange


def run_benchmarking(fed: Federation) -> ledger.Chain:
    config = fed.config

    # 1. Pretraining from the shared initial parameters.
    for pid in fed.alive_ids():
        party = fed.parties[pid]
        if party.is_free_rider or config.pretrain_epochs == 0:
            pass
        else:
            train_local(
                party.model, party.shard, config.pretrain_epochs,
                config.batch_size, config.learning_rate, config.lr_decay,
                fed.train_rngs[pid], round_id=0, owner=pid,
            )
        party.standalone_accuracy = evaluate(party.model, fed.test)

    # 2-4. Publish, cross-label, vote, seed normalized credibility ledgers.
    matrices = fed._mutual_evaluation(BENCHMARK_TAG)
    sample_commitments = {}
    for pid, matrix in matrices.items():
        party = fed.parties[pid]
        batch = fed._publish_batch(party, BENCHMARK_TAG)  # same stream, same batch
        sample_commitments[pid] = crypto.sha256(idx_bytes(batch))
        party.credibility = evaluation.init_credibility(
            pid, matrix, party.published_count
        )

    # 5. Majority ban vote (repeats until stable).
    removed = fed._ban_vote_loop(round_id=0)
    alive = fed.alive_ids()
    if len(alive) < 2:
        raise FederationAbort(
            f"benchmarking left {len(alive)} credible parties; need at least 2"
        )

    # 6. Points initialization over the surviving federation size.
    n_alive = len(alive)
    for party in fed.parties.values():
        party.account = economy.PointsAccount(
            party.id,
            economy.init_points(party.sharing_level, fed.n_params, n_alive),
        )

    # Genesis: one INIT per party (banned ones included so the ban itself
    # can be committed), plus the validator's signing key with no points.
    entries = []
    for pid in sorted(fed.parties):
        party = fed.parties[pid]
        body = ledger.InitBody(
            party.account.balance,
            sample_commitments[pid],
            party.keys.verify_key,
            party.keys.wrap_key,
        )
        entries.append((pid, body, party.keys.signing_key))
    validator_body = ledger.InitBody(
        0, bytes(32), fed.validator_keys.verify_key, fed.validator_keys.wrap_key
    )
    entries.append(
        (ledger.VALIDATOR_ID, validator_body, fed.validator_keys.signing_key)
    )
    fed.chain = ledger.make_genesis(entries)
    fed.genesis_points = sum(p.account.balance for p in fed.parties.values())
    fed._commit_bans(removed, round_id=0)
    fed._assert_conservation()
    return fed.chain


# ---------------------------------------------------------------------------
# One collaborative round
# ---------------------------------------------------------------------------


def run_round(fed: Federation, round_id: int) -> RoundReport:
    if fed.chain is None:
        raise RuntimeError("run_benchmarking must complete first")
    alive = fed.alive_ids()
    if len(alive) < 2:
        raise FederationAbort(f"only {len(alive)} credible parties remain")
    snapshot = fed._snapshot()
    try:
        return _run_round_inner(fed, round_id, alive)
    except ledger.LedgerError as exc:
        fed._restore(snapshot)
        raise RoundAborted(f"round {round_id} rolled back: {exc}") from exc


def _run_round_inner(
    fed: Federation, round_id: int, alive: List[int]
) -> RoundReport:
    config = fed.config
    codec = fed.codec

    # 1. Local training; the whole-round delta is what gets traded.
    deltas: Dict[int, GradientVector] = {}
    for pid in alive:
        party = fed.parties[pid]
        if party.is_free_rider:
            deltas[pid] = GradientVector(
                np.zeros(fed.n_params), round_id, pid
            )
        else:
            deltas[pid] = train_local(
                party.model, party.shard, config.epochs_per_round,
                config.batch_size, config.learning_rate, config.lr_decay,
                fed.train_rngs[pid], round_id=round_id, owner=pid,
            )

    # 2. Budgets, allocations, one DOWNLOAD per (requester, uploader) pair.
    allocations: Dict[Tuple[int, int], Tuple[int, int]] = {}
    download_txs = []
    for requester in alive:
        party = fed.parties[requester]
        budget = economy.set_budget(party.account)
        if budget <= 0:
            continue  # downloads nothing this round; may still upload
        for uploader in alive:
            if uploader == requester:
                continue
            peer = fed.parties[uploader]
            amount = economy.allocate(
                party.credibility.scores[uploader], budget,
                peer.sharing_level, fed.n_params,
            )
            request_id = fed.next_request_id()
            allocations[(requester, uploader)] = (request_id, amount)
            body = ledger.DownloadBody(
                request_id, uploader, amount, party.keys.wrap_key
            )
            download_txs.append(
                ledger.signed_transaction(
                    ledger.TxKind.DOWNLOAD, requester, body,
                    party.keys.signing_key,
                )
            )
    if download_txs:
        fed.chain.append_block(download_txs)

    # 3. Fresh zero-sum keystreams over the current credible set.
    streams = (
        fed.dealer.deal_keystreams(alive, round_id, fed.n_params)
        if config.encrypt
        else None
    )

    # 4. Masking, encoding, encryption, upload commitments.
    payloads: Dict[Tuple[int, int], bytes] = {}
    upload_txs = []
    for (requester, uploader) in sorted(allocations):
        request_id, amount = allocations[(requester, uploader)]
        masked = select_largest(
            np.clip(deltas[uploader].values, -config.clip, config.clip), amount
        )
        words = codec.encode_vector(masked)
        if config.encrypt:
            cipher = crypto.encrypt_vector(words, streams[uploader])
            payload = crypto.onion_wrap(
                cipher.to_bytes(),
                fed.parties[requester].keys.wrap_key,
                child_rng(
                    config.seed_sampling, _P_ONION, round_id, requester, uploader
                ),
            )
        else:
            payload = crypto.CipherVector(words, round_id, uploader).to_bytes()
        payloads[(requester, uploader)] = payload
        body = ledger.UploadBody(request_id, crypto.sha256(payload))
        upload_txs.append(
            ledger.signed_transaction(
                ledger.TxKind.UPLOAD, uploader, body,
                fed.parties[uploader].keys.signing_key,
            )
        )
    if upload_txs:
        fed.chain.append_block(upload_txs)

    # Mirror the settled transfers into the in-memory accounts.
    for (requester, uploader), (request_id, amount) in allocations.items():
        economy.transfer(
            fed.parties[requester].account,
            fed.parties[uploader].account,
            amount,
        )

    # 5. Unwrap, aggregate-decrypt, and apply updates.
    for requester in alive:
        senders = [u for (r, u) in allocations if r == requester]
        if not senders:
            continue
        if config.encrypt:
            ciphers = []
            for uploader in sorted(senders):
                raw = crypto.onion_unwrap(
                    payloads[(requester, uploader)],
                    fed.parties[requester].keys.unwrap_key,
                )
                cipher = crypto.CipherVector.from_bytes(raw)
                if cipher.round_id != round_id or cipher.sender_id != uploader:
                    raise ledger.LedgerError(
                        f"stale or misattributed payload from {uploader}"
                    )
                ciphers.append(cipher)
            words = crypto.aggr_dec(ciphers, streams[requester], codec)
        else:
            words = np.zeros(fed.n_params, dtype=np.uint64)
            for uploader in sorted(senders):
                cipher = crypto.CipherVector.from_bytes(
                    payloads[(requester, uploader)]
                )
                words = (words + cipher.ciphertexts) % codec.modulus
        peer_sum = codec.decode_vector(words)
        apply_update(
            fed.parties[requester].model, deltas[requester].values, peer_sum
        )

    # 6. Mutual re-evaluation with current models, blend, vote, ban.
    matrices = fed._mutual_evaluation(round_id)
    for pid in alive:
        party = fed.parties[pid]
        raw = evaluation.raw_agreement_scores(matrices[pid])
        fresh = {peer: raw[peer] for peer in party.credibility.scores}
        party.credibility = evaluation.update_credibility(party.credibility, fresh)
    removed = fed._ban_vote_loop(round_id)
    fed._commit_bans(removed, round_id)

    # 7. Report and invariants.
    fed._assert_conservation()
    survivors = fed.alive_ids()
    accuracies = {
        pid: evaluate(fed.parties[pid].model, fed.test) for pid in survivors
    }
    credibility = {
        pid: dict(fed.parties[pid].credibility.scores) for pid in survivors
    }
    return RoundReport(
        round_id=round_id,
        accuracies=accuracies,
        balances={pid: p.account.balance for pid, p in fed.parties.items()},
        credibility=credibility,
        banned=removed,
        ledger_height=fed.chain.height,
        circulating_points=fed.chain.circulating_total(),
        frozen_points=fed.chain.frozen_total(),
    )


# ---------------------------------------------------------------------------
# Whole experiments
# ---------------------------------------------------------------------------


def inject_free_rider(config: ExperimentConfig, index: int) -> ExperimentConfig:
    """Config with the party at ``index`` replaced by a data-free adversary."""
    return replace(config, free_rider=index)


def run_experiment(
    config: ExperimentConfig, train: Dataset, test: Dataset
) -> ExperimentResult:
    fed = Federation(config, train, test)
    run_benchmarking(fed)
    reports: List[RoundReport] = []
    best: Dict[int, float] = {}
    for round_id in range(1, config.rounds + 1):
        if len(fed.alive_ids()) < 2:
            break
        report = run_round(fed, round_id)
        reports.append(report)
        for pid, acc in report.accuracies.items():
            best[pid] = max(best.get(pid, 0.0), acc)

    alive = fed.alive_ids()
    standalone = {
        pid: fed.parties[pid].standalone_accuracy for pid in fed.parties
    }
    final = {
        pid: max(standalone[pid], best.get(pid, 0.0)) for pid in alive
    }
    sharing = {pid: fed.parties[pid].sharing_level for pid in fed.parties}
    fairness = metrics.fairness_report(
        config.setting,
        alive,
        [sharing[pid] for pid in alive],
        [standalone[pid] for pid in alive],
        [final[pid] for pid in alive],
    )
    return ExperimentResult(
        config=config,
        standalone_accuracies=standalone,
        best_accuracies={pid: best[pid] for pid in best},
        final_accuracies=final,
        sharing_levels=sharing,
        reports=reports,
        fairness=fairness,
        chain=fed.chain,
        banned=dict(fed.banned_round),
    )
