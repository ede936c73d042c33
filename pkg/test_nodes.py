#!/usr/bin/env python3
import pytest

from bus import Frame, FrameId, IdWidth
from nodes import (COOL, FLASH_SIZE, HEAT, Actuator, Behavior, ChunkGap, CrcMismatch,
                   FirmwareImage, HBridgeCommand, HBridgeState, ImageTooLarge, InvalidBand,
                   InvalidMode, LoggerProgram, Node, NodeMode, NodeStatus, SdCard, SdFileReceiver,
                   SdFull, UnknownDevice, decode_image, drive_args, encode_image, encode_record,
                   iter_records, log_file_name, log_seq, thermal_regulate)
from transport import CtsTimeout, stream_with_cts


def make_node(behavior=Behavior.CAMERA, version=1):
    return Node(5, "camera", FirmwareImage.build(behavior, version), sd=SdCard(4096))


def test_sd_card_capacity():
    sd = SdCard(100)
    sd.write("A.BIN", bytes(40))
    sd.append("A.BIN", bytes(10))
    assert sd.used == 50 and sd.free == 50
    with pytest.raises(SdFull):
        sd.append("A.BIN", bytes(51))
    # 上書きは差分だけ数える
    sd.write("A.BIN", bytes(90))
    assert sd.free == 10
    sd.fill(4)
    assert sd.free == 4
    assert sd.names() == ["A.BIN", "FILLER.BIN"]
    sd.delete("FILLER.BIN")
    assert sd.names("FILL") == []


def test_log_records_round_trip_through_sd():
    frames = [Frame(FrameId(0x101), b"\x01\x02\x03", 2),
              Frame(FrameId(0x1ABCDEF, IdWidth.EXTENDED29), b"", 7)]
    data = b"".join(encode_record(1_000 * i, f) for i, f in enumerate(frames))
    records = [record for _, record in iter_records(data)]
    assert [r.to_frame() for r in records] == frames
    assert [r.timestamp_us for r in records] == [0, 1_000]
    with pytest.raises(ValueError) as excinfo:
        list(iter_records(data[:-1]))
    first_size = len(encode_record(0, frames[0]))
    assert excinfo.value.args[0] == first_size


def test_log_names():
    assert log_file_name(7) == "LOG0007.BIN"
    assert log_seq("LOG0007.BIN") == 7
    assert log_seq("IMG0001.JPG") is None
    assert log_seq("LOGxyz.BIN") is None


def test_firmware_images():
    image = FirmwareImage.build(Behavior.LOGGER, 2, size=1000, seed=3)
    assert image == FirmwareImage.build(Behavior.LOGGER, 2, size=1000, seed=3)
    assert image.verify()
    assert len(image.data) == 1000
    with pytest.raises(ImageTooLarge):
        FirmwareImage(bytes(FLASH_SIZE + 1), 1, Behavior.LOGGER)


def test_hbridge_relays():
    assert HBridgeState.from_command(HBridgeCommand.FORWARD).motion == "forward"
    assert HBridgeState.from_command(HBridgeCommand.REVERSE).motion == "reverse"
    assert HBridgeState.from_command(HBridgeCommand.STOP).motion == "off"
    assert HBridgeState(True, True).motion == "brake"
    assert drive_args("linear_actuator", HBridgeCommand.REVERSE) == bytes([2, 2])
    with pytest.raises(UnknownDevice):
        drive_args("jetpack", HBridgeCommand.FORWARD)


def test_actuator_moves_and_clamps():
    arm = Actuator(rate=10.0, angle=0.0)
    arm.set(HBridgeCommand.FORWARD, 0)
    assert arm.angle_at(3_000_000) == 30.0
    assert arm.angle_at(20_000_000) == 90.0
    arm.set(HBridgeCommand.STOP, 5_000_000)
    assert arm.angle_at(60_000_000) == 50.0
    arm.set(HBridgeCommand.REVERSE, 60_000_000)
    assert arm.angle_at(200_000_000) == 0.0


def test_thermal_regulation():
    assert thermal_regulate(45.0, (5.0, 40.0)) is COOL
    assert thermal_regulate(-3.0, (5.0, 40.0)) is HEAT
    assert thermal_regulate(20.0, (5.0, 40.0)) is HBridgeCommand.STOP
    with pytest.raises(InvalidBand):
        thermal_regulate(20.0, (40.0, 5.0))


def test_node_status_layout():
    status = NodeStatus(5, int(Behavior.LOGGER), 3, int(NodeMode.NORMAL), True, 123456)
    assert NodeStatus.decode(status.encode()) == status


def test_image_payload():
    assert decode_image(encode_image("IMG0001.JPG", b"\xff\xd8")) == ("IMG0001.JPG", b"\xff\xd8")


def test_reflash_target_writes_chunks_in_order():
    node = make_node()
    image = FirmwareImage.build(Behavior.LOGGER, 2, size=150)
    node.enter_reflash(Behavior.LOGGER, 2, len(image.data), image.crc, host=4)
    assert node.mode is NodeMode.REFLASH_LOOP
    assert node.apply_chunk(0, image.data[:64]).chunk_index == 0
    with pytest.raises(ChunkGap):
        node.apply_chunk(2, image.data[128:])
    node.apply_chunk(1, image.data[64:128])
    node.apply_chunk(2, image.data[128:])
    node.finalize()
    assert node.mode is NodeMode.NORMAL
    assert node.behavior is Behavior.LOGGER and node.version == 2
    assert isinstance(node.program, LoggerProgram) and node.program.active


def test_reflash_crc_mismatch_keeps_old_firmware():
    node = make_node()
    image = FirmwareImage.build(Behavior.LOGGER, 2, size=64)
    node.enter_reflash(Behavior.LOGGER, 2, 64, image.crc ^ 0x1, host=4)
    node.apply_chunk(0, image.data)
    with pytest.raises(CrcMismatch):
        node.finalize()
    assert node.mode is NodeMode.NORMAL
    assert node.behavior is Behavior.CAMERA and node.version == 1


def test_reflash_entry_checks():
    node = make_node()
    with pytest.raises(ImageTooLarge):
        node.enter_reflash(Behavior.LOGGER, 2, FLASH_SIZE + 1, 0)
    assert node.mode is NodeMode.NORMAL
    with pytest.raises(InvalidMode):
        node.apply_chunk(0, b"x")
    node.mode = NodeMode.DEAD
    with pytest.raises(InvalidMode):
        node.enter_reflash(Behavior.LOGGER, 2, 10, 0)


def test_power_load_counts_running_motors():
    node = Node(9, "drive", FirmwareImage.build(Behavior.OUTPUT, 1), load_w=1.5)
    node.devices = {"drive_left": HBridgeState(), "drive_right": HBridgeState()}
    node.hbridge_set("drive_left", HBridgeCommand.FORWARD)
    assert node.power_load() == {"logic": 1.5, "power": 20.0}
    with pytest.raises(UnknownDevice):
        node.hbridge_set("peltier_camera", HBridgeCommand.FORWARD)
    node.mode = NodeMode.HIBERNATE
    assert node.power_load() == {"logic": 0.0, "power": 0.0}


def test_sd_file_receiver_writes_chunks_in_order():
    node = make_node()
    receiver = SdFileReceiver(node, "FW003V002.BIN")
    token = receiver.accept_chunk(0, b"ab")
    assert token.chunk_index == 0 and token.receiver == 5
    assert receiver.accept_chunk(2, b"ef") is None
    receiver.accept_chunk(1, b"cd")
    assert node.sd.read("FW003V002.BIN") == b"abcd"
    receiver.rollback()
    assert node.sd.names("FW") == []


def test_sd_file_receiver_stops_when_the_card_is_full():
    node = Node(5, "camera", FirmwareImage.build(Behavior.CAMERA, 1), sd=SdCard(100))
    receiver = SdFileReceiver(node, "FW003V002.BIN")
    with pytest.raises(CtsTimeout) as excinfo:
        stream_with_cts(bytes(150), 64, receiver)
    assert excinfo.value.index == 1
    assert isinstance(receiver.error, SdFull)
    assert node.sd.names("FW") == []
