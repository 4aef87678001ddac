"""End-to-end tests of the pointbridge-export command line."""

import json
import os

import pytest

from pointbridge_export.cli import main


class TestExportCommand:
    def test_export_then_validate(self, clip_source, tmp_path, capsys):
        """A full export followed by validation succeeds with exit 0."""
        out = str(tmp_path / "cli.zip")
        code = main([
            "export", "--source", clip_source, "--mapping", "clip_text",
            "--out", out, "--n-heads", "4",
        ])
        assert code == 0
        stdout = capsys.readouterr().out
        assert "pe_resized=false" in stdout
        assert "cls_synthesized=true" in stdout
        assert main(["validate", out]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[-1].endswith("0 failed")

    def test_plane_flags_reach_the_archive(self, dino_source, tmp_path, capsys):
        out = str(tmp_path / "cli_dino.zip")
        code = main([
            "export", "--source", dino_source, "--mapping", "dinov2",
            "--out", out, "--n-heads", "2", "--modality-tag", "vision",
            "--plane-extent", "182,182", "--patch-size", "26",
        ])
        assert code == 0
        assert "pe_resized=false" in capsys.readouterr().out

    def test_block_range_flags(self, clip_source, tmp_path, capsys):
        out = str(tmp_path / "cli_slice.zip")
        code = main([
            "export", "--source", clip_source, "--mapping", "clip_text",
            "--out", out, "--n-heads", "4", "--first-block", "1", "--n-blocks", "2",
        ])
        assert code == 0
        assert "2 blocks" in capsys.readouterr().out

    def test_unknown_mapping_exits_3(self, clip_source, tmp_path, capsys):
        code = main([
            "export", "--source", clip_source, "--mapping", "nope",
            "--out", str(tmp_path / "x.zip"), "--n-heads", "4",
        ])
        assert code == 3
        assert "error:" in capsys.readouterr().err

    def test_missing_source_exits_3(self, tmp_path, capsys):
        code = main([
            "export", "--source", str(tmp_path / "absent.pt"), "--mapping", "clip_text",
            "--out", str(tmp_path / "x.zip"), "--n-heads", "4",
        ])
        assert code == 3


class TestValidateCommand:
    def test_corruption_exits_1_with_named_line(self, clip_source, tmp_path, capsys):
        """Corrupting one payload byte is reported by tensor name, exit 1."""
        out = str(tmp_path / "corrupt_dir")
        assert main([
            "export", "--source", clip_source, "--mapping", "clip_text",
            "--out", out, "--n-heads", "4",
        ]) == 0
        capsys.readouterr()
        with open(os.path.join(out, "manifest.json"), encoding="utf-8") as fh:
            entry = next(
                e for e in json.load(fh)["tensors"] if e["name"] == "blocks.1.attn.v.w"
            )
        blob = os.path.join(out, "tensors.bin")
        with open(blob, "r+b") as fh:
            fh.seek(entry["offset"] + 3)
            byte = fh.read(1)
            fh.seek(entry["offset"] + 3)
            fh.write(bytes([byte[0] ^ 0xFF]))
        assert main(["validate", out]) == 1
        stdout = capsys.readouterr().out
        failing = [line for line in stdout.splitlines() if line.startswith("ChecksumError")]
        assert len(failing) == 1
        assert "blocks.1.attn.v.w" in failing[0]

    def test_missing_archive_exits_3(self, tmp_path, capsys):
        assert main(["validate", str(tmp_path / "nothing")]) == 3


class TestUsage:
    def test_missing_required_flag_exits_2(self, capsys):
        assert main(["export", "--mapping", "clip_text"]) == 2

    def test_bad_extent_exits_2(self, clip_source, tmp_path, capsys):
        code = main([
            "export", "--source", clip_source, "--mapping", "clip_text",
            "--out", str(tmp_path / "x.zip"), "--n-heads", "4",
            "--plane-extent", "512x512",
        ])
        assert code == 2

    def test_help_exits_0(self, capsys):
        assert main(["--help"]) == 0
        assert main(["export", "--help"]) == 0
