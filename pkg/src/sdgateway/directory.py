"""The State Directory: replayable dynamic-state entries derived purely
from intercepted packets and their direction of travel.

Entries mirror what the destination node will hold in volatile memory:
PUT values, observe relationships (with live observe/retransmit
counters), binding descriptors and deployed-module records.  All
mutation goes through the two intercept operations; reads are snapshots.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Callable, Optional, Tuple

from .coap import (
    MAX_RETRANSMIT,
    BindingInfo,
    CoapMessage,
    Endpoint,
    InteractionKind,
    classify,
)


class EntryType(IntEnum):
    PUT = 2
    OBSERVE = 5
    BIND = 6
    DEPLOY = 7


class DeployMode(Enum):
    FILENAME_ONLY = "filename"   # node reloads the module from its own flash
    BLOCK_CAPTURE = "blocks"     # gateway replays the whole block transfer


class EffectKind(Enum):
    CREATED = "Created"
    UPDATED = "Updated"
    REMOVED = "Removed"
    NO_EFFECT = "NoEffect"


class RegistrationStatus(Enum):
    NEW = "new"
    KNOWN_EMPTY = "known_empty"
    KNOWN_WITH_STATE = "known_with_state"


@dataclass
class DeployInfo:
    filename: str
    loader_path: str
    blocks: Optional[Tuple[bytes, ...]] = None  # present only in block-capture mode


@dataclass
class SDEntry:
    entry_type: EntryType
    client: Endpoint
    server: Endpoint
    uri_path: str
    token: bytes = b""
    mid: int = 0
    observe_counter: int = 0
    retransmit_counter: int = 0
    value: bytes = b""
    content_format: Optional[int] = None
    binding: Optional[BindingInfo] = None
    deploy: Optional[DeployInfo] = None
    created_at: float = 0.0
    updated_at: float = 0.0


@dataclass(frozen=True)
class SDEffect:
    kind: EffectKind
    entry: Optional[SDEntry] = None

    def __post_init__(self) -> None:
        if self.kind is EffectKind.NO_EFFECT:
            assert self.entry is None
        else:
            assert self.entry is not None


NO_EFFECT = SDEffect(EffectKind.NO_EFFECT)


class StateDirectory:
    """Gateway-resident store of replayable dynamic states.

    A single logical state machine: callers must serialize mutations
    (the simulator's event loop does).  `clock` supplies simulated time
    for the created/updated stamps.
    """

    def __init__(self, clock: Callable[[], float] = lambda: 0.0, *,
                 max_retransmit: int = MAX_RETRANSMIT,
                 deploy_mode: DeployMode = DeployMode.FILENAME_ONLY,
                 trace=None) -> None:
        self.entries: list[SDEntry] = []
        self.known_nodes: set[str] = set()
        self.max_retransmit = max_retransmit
        self.deploy_mode = deploy_mode
        self._clock = clock
        self._trace = trace
        # Partial block transfers, keyed (client, server, loader path).
        self._pending_blocks: dict[tuple[Endpoint, Endpoint, str], list[bytes]] = {}

    # -- collection ----------------------------------------------------

    def intercept_from_internet(self, msg: CoapMessage, src: Endpoint, dst: Endpoint) -> SDEffect:
        """Inspect a packet heading into the LLN.  Never blocks or
        mutates the packet; only the directory may change."""
        kind = classify(msg)
        uri = msg.options.path_str()
        if kind is InteractionKind.PUT_REQUEST:
            effect = self._upsert_put(msg, src, dst, uri)
        elif kind is InteractionKind.OBSERVE_REGISTER:
            effect = self._upsert_observe(msg, src, dst, uri)
        elif kind is InteractionKind.OBSERVE_DEREGISTER:
            effect = self._remove(self._find_observe(src, dst, uri), "deregister")
        elif kind is InteractionKind.BINDING_REQUEST:
            effect = self._upsert_bind(msg, src, dst, uri)
        elif kind is InteractionKind.DEPLOY_BLOCK:
            effect = self._deploy_block(msg, src, dst, uri)
        elif kind is InteractionKind.RESET_SIGNAL:
            effect = self._remove(self._find_observe_by_mid(src, dst, msg.mid), "rst")
        elif kind is InteractionKind.ACK_SIGNAL:
            effect = self._client_ack(src, dst, msg.mid)
        else:
            effect = NO_EFFECT
        self._log("in", effect)
        self._check_invariants()
        return effect

    def intercept_from_lln(self, msg: CoapMessage, src: Endpoint, dst: Endpoint) -> SDEffect:
        """Inspect a packet leaving the LLN.  Only observe notifications
        (and their retransmissions) have an effect."""
        if classify(msg) is not InteractionKind.NOTIFICATION:
            self._log("lln", NO_EFFECT)
            return NO_EFFECT
        entry = None
        for e in self.entries:
            if (e.entry_type is EntryType.OBSERVE and e.server == src
                    and e.client == dst and e.token == msg.token):
                entry = e
                break
        if entry is None:
            # Collection is driven by requests; a stray notification
            # never creates state.
            effect = NO_EFFECT
        elif msg.mid == entry.mid:
            entry.retransmit_counter += 1
            entry.updated_at = self._clock()
            if entry.retransmit_counter >= self.max_retransmit:
                effect = self._remove(entry, "retransmit")
            else:
                effect = SDEffect(EffectKind.UPDATED, entry)
        else:
            entry.observe_counter = msg.options.observe or 0
            entry.mid = msg.mid
            entry.retransmit_counter = 0
            entry.updated_at = self._clock()
            effect = SDEffect(EffectKind.UPDATED, entry)
        self._log("lln", effect)
        self._check_invariants()
        return effect

    # -- queries -------------------------------------------------------

    def entries_for_server(self, server_addr: str) -> list[SDEntry]:
        found = [e for e in self.entries if e.server.addr == server_addr]
        found.sort(key=lambda e: e.created_at)  # stable; list is already creation-ordered
        return found

    def register_node(self, node_addr: str) -> RegistrationStatus:
        known = node_addr in self.known_nodes
        self.known_nodes.add(node_addr)
        if self.entries_for_server(node_addr):
            return RegistrationStatus.KNOWN_WITH_STATE
        return RegistrationStatus.KNOWN_EMPTY if known else RegistrationStatus.NEW

    def snapshot_lines(self) -> list[str]:
        """One tab-separated line per entry, stable field order, addresses
        in canonical text form.  Used by the harness for assertions."""
        lines = []
        for e in self.entries:
            binding = "-"
            if e.binding is not None:
                b = e.binding
                binding = f"{b.dest_addr},{b.dest_resource},{b.pmin},{b.pmax}"
            deploy = "-"
            if e.deploy is not None:
                nblocks = len(e.deploy.blocks) if e.deploy.blocks is not None else 0
                deploy = f"{e.deploy.filename},{e.deploy.loader_path},{nblocks}"
            cf = "-" if e.content_format is None else str(e.content_format)
            lines.append("\t".join([
                str(int(e.entry_type)), str(e.client), str(e.server), e.uri_path,
                e.token.hex() or "-", str(e.mid), str(e.observe_counter),
                str(e.retransmit_counter), e.value.hex() or "-", cf,
                binding, deploy, f"{e.created_at:.3f}", f"{e.updated_at:.3f}",
            ]))
        return lines

    def write_snapshot(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for line in self.snapshot_lines():
                fh.write(line + "\n")

    # -- internals -----------------------------------------------------

    def _upsert_put(self, msg, src, dst, uri) -> SDEffect:
        now = self._clock()
        for e in self.entries:
            if e.entry_type is EntryType.PUT and e.server == dst and e.uri_path == uri:
                e.value = msg.payload
                e.content_format = msg.options.content_format
                e.client = src  # latest client endpoint wins the replay spoof
                e.token = msg.token
                e.mid = msg.mid
                e.updated_at = now
                return SDEffect(EffectKind.UPDATED, e)
        entry = SDEntry(EntryType.PUT, src, dst, uri, token=msg.token, mid=msg.mid,
                        value=msg.payload, content_format=msg.options.content_format,
                        created_at=now, updated_at=now)
        self.entries.append(entry)
        return SDEffect(EffectKind.CREATED, entry)

    def _find_observe(self, client, server, uri) -> Optional[SDEntry]:
        for e in self.entries:
            if (e.entry_type is EntryType.OBSERVE and e.client == client
                    and e.server == server and e.uri_path == uri):
                return e
        return None

    def _find_observe_by_mid(self, client, server, mid) -> Optional[SDEntry]:
        for e in self.entries:
            if (e.entry_type is EntryType.OBSERVE and e.client == client
                    and e.server == server and e.mid == mid):
                return e
        return None

    def _upsert_observe(self, msg, src, dst, uri) -> SDEffect:
        now = self._clock()
        entry = self._find_observe(src, dst, uri)
        if entry is not None:
            entry.token = msg.token
            entry.mid = msg.mid
            entry.updated_at = now
            return SDEffect(EffectKind.UPDATED, entry)
        entry = SDEntry(EntryType.OBSERVE, src, dst, uri, token=msg.token, mid=msg.mid,
                        observe_counter=0, retransmit_counter=0,
                        created_at=now, updated_at=now)
        self.entries.append(entry)
        return SDEffect(EffectKind.CREATED, entry)

    def _upsert_bind(self, msg, src, dst, uri) -> SDEffect:
        now = self._clock()
        info = msg.options.binding
        for e in self.entries:
            if (e.entry_type is EntryType.BIND and e.server == dst and e.uri_path == uri
                    and e.binding is not None
                    and e.binding.dest_addr == info.dest_addr
                    and e.binding.dest_resource == info.dest_resource):
                e.binding = info
                e.client = src
                e.token = msg.token
                e.mid = msg.mid
                e.updated_at = now
                return SDEffect(EffectKind.UPDATED, e)
        entry = SDEntry(EntryType.BIND, src, dst, uri, token=msg.token, mid=msg.mid,
                        binding=info, created_at=now, updated_at=now)
        self.entries.append(entry)
        return SDEffect(EffectKind.CREATED, entry)

    def _deploy_block(self, msg, src, dst, uri) -> SDEffect:
        block = msg.options.block1
        key = (src, dst, uri)
        if block.num == 0:
            self._pending_blocks[key] = [msg.payload]
            buf = self._pending_blocks[key]
        else:
            buf = self._pending_blocks.get(key)
            if buf is None or block.num != len(buf):
                # Retransmitted or orphaned fragment; stop-and-wait transfers
                # only ever append the next expected block.
                return NO_EFFECT
            buf.append(msg.payload)
        if block.more:
            return NO_EFFECT  # entry materializes only when the last block passes
        del self._pending_blocks[key]
        filename = msg.options.query_value("file")
        if not filename:
            return NO_EFFECT
        blocks = tuple(buf) if self.deploy_mode is DeployMode.BLOCK_CAPTURE else None
        now = self._clock()
        for e in self.entries:
            if (e.entry_type is EntryType.DEPLOY and e.server == dst
                    and e.deploy is not None and e.deploy.filename == filename):
                e.deploy = DeployInfo(filename, uri, blocks)
                e.client = src
                e.token = msg.token
                e.mid = msg.mid
                e.updated_at = now
                return SDEffect(EffectKind.UPDATED, e)
        entry = SDEntry(EntryType.DEPLOY, src, dst, uri, token=msg.token, mid=msg.mid,
                        deploy=DeployInfo(filename, uri, blocks),
                        created_at=now, updated_at=now)
        self.entries.append(entry)
        return SDEffect(EffectKind.CREATED, entry)

    def _client_ack(self, src, dst, mid) -> SDEffect:
        entry = self._find_observe_by_mid(src, dst, mid)
        if entry is None or entry.retransmit_counter == 0:
            return NO_EFFECT
        entry.retransmit_counter = 0
        entry.updated_at = self._clock()
        return SDEffect(EffectKind.UPDATED, entry)

    def _remove(self, entry: Optional[SDEntry], reason: str) -> SDEffect:
        if entry is None:
            return NO_EFFECT
        self.entries.remove(entry)
        if self._trace is not None:
            self._trace.emit("sd_remove", reason=reason, et=int(entry.entry_type),
                             server=entry.server.addr, uri=entry.uri_path, mid=entry.mid,
                             ret=entry.retransmit_counter)
        return SDEffect(EffectKind.REMOVED, entry)

    def _log(self, direction: str, effect: SDEffect) -> None:
        if self._trace is None or effect.kind is EffectKind.NO_EFFECT:
            return
        e = effect.entry
        self._trace.emit("sd", dir=direction, effect=effect.kind.value,
                         et=int(e.entry_type), client=str(e.client), server=str(e.server),
                         uri=e.uri_path, obs=e.observe_counter, mid=e.mid,
                         ret=e.retransmit_counter)

    def _check_invariants(self) -> None:
        seen_obs = set()
        seen_put = set()
        for e in self.entries:
            if e.entry_type is EntryType.OBSERVE:
                key = (e.client, e.server, e.uri_path)
                assert key not in seen_obs, f"duplicate OBSERVE entry {key}"
                seen_obs.add(key)
                assert e.retransmit_counter <= self.max_retransmit
            elif e.entry_type is EntryType.PUT:
                key = (e.server, e.uri_path)
                assert key not in seen_put, f"duplicate PUT entry {key}"
                seen_put.add(key)
                assert e.observe_counter == 0
            elif e.entry_type is EntryType.BIND:
                assert e.binding is not None
            elif e.entry_type is EntryType.DEPLOY:
                assert e.deploy is not None
