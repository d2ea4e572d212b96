"""Simulated devices: enrol with a home gateway, emit signed readings,
answer key-rotation requests.

A device is deliberately dumb.  It holds a keypair, stamps and signs each
reading, and reacts to whatever its home gateway tells it: a rejection means
one extra emission is owed, a key request means generate-and-reply.  Nothing
here touches the chain; the gateway is the only authority the device knows.

Data frames are only answered when something is wrong — the appended ledger
entry is the acknowledgement, and the happy path stays at one frame per
reading.  The device therefore counts an emission as delivered unless a
rejection status arrives for it.
"""

from __future__ import annotations

import logging
from random import Random
from typing import Optional

from . import codec
from .chain import DeviceInfo
from .codec import DecodeError, Reader
from .crypto import KeyPair, generate_keypair, sha256, sign
from .gateway import StatusCode, parse_status
from .network import MS, WorkClock, wall_ms

logger = logging.getLogger(__name__)

RETRY_DELAY_US = 2 * MS
CONNECT_RETRY_US = 4000 * MS
CONNECT_MAX_ATTEMPTS = 25


def payload_bytes(public_key: bytes, seq: int, size: int) -> bytes:
    """Deterministic reading payload: a hash stream keyed by the device's
    current public key and emission sequence number."""
    out = bytearray()
    counter = 0
    while len(out) < size:
        out.extend(sha256(public_key + seq.to_bytes(8, "big") + counter.to_bytes(4, "big")))
        counter += 1
    return bytes(out[:size])


def make_info(
    pair: KeyPair,
    data: bytes,
    produced_at: int,
    *,
    access_level: int = 0,
    gps: Optional[tuple[int, int]] = None,
) -> DeviceInfo:
    """Build and sign a reading as the device would."""
    unsigned = DeviceInfo(
        device_sig=b"",
        access_level=access_level,
        gps=gps,
        data=data,
        produced_at=produced_at,
    )
    sig = sign(pair.secret, unsigned.signed_payload())
    return DeviceInfo(
        device_sig=sig,
        access_level=access_level,
        gps=gps,
        data=data,
        produced_at=produced_at,
    )


class SimDevice:
    """One device: connect, then emit until the target count is delivered.

    ``misbehave_rotations`` makes the device answer that many key requests
    with its current (already enrolled) key; ``silent_rotations`` makes it
    ignore that many requests outright.  Both model broken devices whose
    rotation the gateway must reject or time out.
    """

    def __init__(
        self,
        node_id: str,
        home_id: str,
        net,
        rng: Random,
        *,
        tx_target: int = 10,
        interval_us: int = 50 * MS,
        payload_size: int = 64,
        access_level: int = 0,
        gps: Optional[tuple[int, int]] = None,
        misbehave_rotations: int = 0,
        silent_rotations: int = 0,
    ):
        self.node_id = node_id
        self.home_id = home_id
        self.net = net
        self.rng = rng
        self.pair = generate_keypair(rng)
        self.tx_target = tx_target
        self.interval_us = interval_us
        self.payload_size = payload_size
        self.access_level = access_level
        self.gps = gps
        self.misbehave_rotations = misbehave_rotations
        self.silent_rotations = silent_rotations

        self.pending_pair: Optional[KeyPair] = None
        self.key_history: list[KeyPair] = []
        self.onboarded = False
        self.rotating = False
        self.refused = False
        self.seq = 0
        self.remaining = tx_target  # entries still owed to the ledger
        self.emitted = 0
        self.rejections: dict[StatusCode, int] = {}
        self.rotations_completed = 0
        self.connect_attempts = 0
        self._tick_scheduled = False

    # -- callbacks -----------------------------------------------------

    def on_timer(self, tag: object, clock: WorkClock) -> None:
        if not isinstance(tag, tuple) or not tag:
            return
        if tag[0] == "start":
            self._connect(clock)
        elif tag[0] == "emit":
            self._tick_scheduled = False
            self._tick(clock)

    def on_message(self, sender: str, frame: bytes, clock: WorkClock) -> None:
        if not frame:
            return
        try:
            if frame[0] == codec.MSG_STATUS:
                self._on_status(*parse_status(frame), clock)
            elif frame[0] == codec.MSG_NEW_KEY_REQUEST:
                self._on_new_key_request(clock)
        except DecodeError as exc:
            logger.debug("%s: bad frame from %s: %s", self.node_id, sender, exc)

    # -- connect -------------------------------------------------------

    def _connect(self, clock: WorkClock) -> None:
        if self.onboarded or self.refused:
            return
        self.connect_attempts += 1
        self.net.send(
            self.node_id,
            self.home_id,
            bytes([codec.MSG_CONNECT]) + codec.pack_bytes(self.pair.public),
        )
        # keep knocking until the gateway answers; a lost frame on either
        # leg would otherwise strand the device forever
        if self.connect_attempts < CONNECT_MAX_ATTEMPTS:
            self.net.set_timer(self.node_id, CONNECT_RETRY_US, ("start",))

    # -- emission loop -------------------------------------------------

    def _schedule_tick(self, delay_us: int) -> None:
        if self._tick_scheduled:
            return
        self._tick_scheduled = True
        self.net.set_timer(self.node_id, delay_us, ("emit",))

    def _tick(self, clock: WorkClock) -> None:
        if self.remaining <= 0 or self.refused:
            return
        if not self.onboarded or self.rotating:
            # rotation completion or onboarding restarts the loop
            return
        self._send_reading(clock)
        if self.remaining > 0:
            self._schedule_tick(self.interval_us)

    def _send_reading(self, clock: WorkClock) -> None:
        info = make_info(
            self.pair,
            payload_bytes(self.pair.public, self.seq, self.payload_size),
            wall_ms(clock.now_us),
            access_level=self.access_level,
            gps=self.gps,
        )
        self.seq += 1
        self.emitted += 1
        self.remaining -= 1
        self.net.send(
            self.node_id, self.home_id, bytes([codec.MSG_DATA]) + info.encode()
        )

    # -- gateway feedback ----------------------------------------------

    def _on_status(self, code: StatusCode, detail: str, clock: WorkClock) -> None:
        if code in (StatusCode.ONBOARDED, StatusCode.ALREADY_KNOWN):
            self.onboarded = True
            self._schedule_tick(self.interval_us)
            return
        if code is StatusCode.KEY_UPDATED:
            if self.pending_pair is not None:
                self.key_history.append(self.pair)
                self.pair = self.pending_pair
                self.pending_pair = None
            self.rotating = False
            self.rotations_completed += 1
            if self.remaining > 0:
                self._schedule_tick(RETRY_DELAY_US)
            return
        if code is StatusCode.ACCEPTED:
            return
        # anything else rejected one emission: it is owed again
        self.rejections[code] = self.rejections.get(code, 0) + 1
        if code is StatusCode.EXPIRED_BLOCK:
            self.remaining += 1
            self.rotating = True
            return
        if code in (StatusCode.INVALID_NEW_KEY, StatusCode.KEY_UPDATE_TIMEOUT):
            # rotation fell through; resume sending so the gateway can start
            # a fresh one (the device may behave better next time)
            self.pending_pair = None
            self.rotating = False
            self._schedule_tick(self.interval_us)
            return
        if code is StatusCode.REFUSED:
            # the gateway is not ready for data yet (its own enrolment is
            # still in flight); the entry is owed again after a backoff
            self.remaining += 1
            self._schedule_tick(RETRY_DELAY_US)
            return
        self.remaining += 1
        self._schedule_tick(self.interval_us)

    def _on_new_key_request(self, clock: WorkClock) -> None:
        self.rotating = True
        if self.silent_rotations > 0:
            self.silent_rotations -= 1
            return
        if self.misbehave_rotations > 0:
            self.misbehave_rotations -= 1
            reply = self.pair.public  # already enrolled: must be refused
        else:
            self.pending_pair = generate_keypair(self.rng)
            reply = self.pending_pair.public
        self.net.send(
            self.node_id,
            self.home_id,
            bytes([codec.MSG_NEW_KEY_RESPONSE]) + codec.pack_bytes(reply),
        )

class DeviceHub:
    """Socket-mode container: many devices behind one transport endpoint.

    The transport hands the hub frames addressed to individual devices (the
    envelope names the device); the hub forwards to the right
    :class:`SimDevice` with the device's home gateway as the sender.
    """

    def __init__(self, node_id: str):
        self.node_id = node_id
        self.devices: dict[str, SimDevice] = {}

    def add(self, device: SimDevice) -> None:
        self.devices[device.node_id] = device

    def on_message(self, sender: str, frame: bytes, clock: WorkClock) -> None:
        device = self.devices.get(sender)
        if device is None:
            logger.warning("%s: frame for unknown device %r", self.node_id, sender)
            return
        device.on_message(device.home_id, frame, clock)

    def on_timer(self, tag: object, clock: WorkClock) -> None:
        pass

    def on_device_timer(self, device_id: str, tag: object, clock: WorkClock) -> None:
        device = self.devices.get(device_id)
        if device is not None:
            device.on_timer(tag, clock)
