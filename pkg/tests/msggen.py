"""Seeded random CoAP message generator shared by codec tests."""

import random

from sdgateway.coap import (
    CHANGED,
    CONTENT,
    CREATED,
    EMPTY,
    GET,
    NOT_FOUND,
    POST,
    PUT,
    BindingInfo,
    Block1,
    CoapMessage,
    MsgType,
    OptionSet,
)

_RESPONSE_CODES = [CREATED, CHANGED, CONTENT, NOT_FOUND, 0x83, 0xA0, 0x5F]
_SEGMENT_CHARS = "abcdefghijklmnopqrstuvwxyz0123456789-_"


def _segment(rng: random.Random) -> str:
    return "".join(rng.choice(_SEGMENT_CHARS) for _ in range(rng.randint(1, 12)))


def random_options(rng: random.Random) -> OptionSet:
    kwargs = {}
    if rng.random() < 0.8:
        kwargs["uri_path"] = tuple(_segment(rng) for _ in range(rng.randint(1, 4)))
    if rng.random() < 0.3:
        kwargs["uri_query"] = tuple(f"{_segment(rng)}={_segment(rng)}" for _ in range(rng.randint(1, 3)))
    if rng.random() < 0.5:
        kwargs["observe"] = rng.choice([0, 1, rng.randrange(0x1000000)])
    if rng.random() < 0.25:
        kwargs["block1"] = Block1(num=rng.randrange(0x100000), more=rng.random() < 0.5,
                                  size=rng.choice([16, 32, 64, 128, 256, 512, 1024]))
    if rng.random() < 0.3:
        kwargs["max_age"] = rng.randrange(0x100000000)
    if rng.random() < 0.3:
        kwargs["content_format"] = rng.randrange(0x10000)
    if rng.random() < 0.2:
        pmin = rng.randrange(3600)
        kwargs["binding"] = BindingInfo(dest_addr=f"aaaa::{rng.randrange(1, 255):x}",
                                        dest_resource=_segment(rng),
                                        pmin=pmin, pmax=pmin + rng.randrange(3600))
    if rng.random() < 0.2:
        kwargs["extra"] = tuple(sorted(
            (rng.choice([1000, 2500, 65000, 2046]), rng.randbytes(rng.randint(0, 16)))
            for _ in range(rng.randint(1, 2))
        ))
    return OptionSet(**kwargs)


def random_message(rng: random.Random) -> CoapMessage:
    roll = rng.random()
    if roll < 0.08:
        # EMPTY messages: CON ping, pure ACK, RST.
        mtype = rng.choice([MsgType.CON, MsgType.ACK, MsgType.RST])
        return CoapMessage(mtype, EMPTY, rng.randrange(0x10000))
    if roll < 0.55:
        mtype = rng.choice([MsgType.CON, MsgType.NON])
        code = rng.choice([GET, POST, PUT])
    else:
        mtype = rng.choice([MsgType.CON, MsgType.NON, MsgType.ACK])
        code = rng.choice(_RESPONSE_CODES)
    payload = rng.randbytes(rng.randint(1, 32)) if rng.random() < 0.5 else b""
    return CoapMessage(
        msg_type=mtype,
        code=code,
        mid=rng.randrange(0x10000),
        token=rng.randbytes(rng.randint(0, 8)),
        options=random_options(rng),
        payload=payload,
    )
