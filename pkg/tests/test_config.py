# tests/test_config.py
import pytest

from lib.config_schema import AppConfig, load_config_file, parse_address


def write(tmp_path, text: str) -> str:
    path = tmp_path / "settings.conf"
    path.write_text(text)
    return str(path)


class TestAddresses:
    def test_host_and_port(self):
        assert parse_address("10.0.0.2:7700") == ("10.0.0.2", 7700)

    def test_empty_host_is_loopback(self):
        assert parse_address(":7701") == ("127.0.0.1", 7701)

    @pytest.mark.parametrize("text", ["7700", "host:", "host:port", "host:70000"])
    def test_rejected(self, text):
        with pytest.raises(ValueError):
            parse_address(text)


class TestConfigFile:
    def test_values_are_typed(self, tmp_path):
        settings = load_config_file(write(tmp_path, """
# monitor side
listen = 0.0.0.0:9000
monitor.timeout = 2.5
monitor.keep_reading_untrusted = off
extractor.path_cap = 0x100
extractor.force_insensitive = yes
target.schedule_file = none
channel.dummy_packets = true   # on
"""), AppConfig())
        assert settings.monitor.listen == "0.0.0.0:9000"
        assert settings.monitor.timeout == 2.5
        assert settings.monitor.keep_reading_untrusted is False
        assert settings.extractor.path_cap == 256
        assert settings.extractor.force_insensitive is True
        assert settings.target.schedule_file is None
        assert settings.channel.dummy_packets is True

    def test_every_error_is_listed(self, tmp_path):
        path = write(tmp_path, "monitor.bogus = 1\nextractor.workers = many\njust text\nchannel.dummy_packets = maybe\n")
        with pytest.raises(ValueError) as e:
            load_config_file(path, AppConfig())
        message = str(e.value)
        assert message.startswith(f"Config file '{path}' is invalid:")
        assert "line 1: unknown setting 'monitor.bogus'" in message
        assert "line 2: extractor.workers: expected an integer" in message
        assert "line 3: expected key=value" in message
        assert "line 4: channel.dummy_packets: expected a boolean" in message

    def test_unknown_section(self, tmp_path):
        with pytest.raises(ValueError, match="unknown setting 'storage.path'"):
            load_config_file(write(tmp_path, "storage.path = /tmp\n"), AppConfig())

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            load_config_file(str(tmp_path / "absent.conf"), AppConfig())


class TestValidation:
    def test_defaults_are_valid(self):
        AppConfig().validate_fully()

    def test_errors_are_aggregated(self):
        settings = AppConfig()
        settings.channel.timeout = 0
        settings.extractor.workers = 0
        settings.monitor.listen = "nowhere"
        settings.target.threads = 0
        with pytest.raises(ValueError) as e:
            settings.validate_fully()
        lines = str(e.value).split("\n - ")
        assert lines[0] == "AppConfig validation failed:"
        assert len(lines) == 5

    def test_dummies_need_a_count(self):
        settings = AppConfig()
        settings.channel.dummy_packets = True
        assert settings.channel.validate() == ["channel.dummy_packets is on but channel.dummy_k_max is 0."]


class TestDummyParams:
    def test_off_by_default(self):
        settings = AppConfig()
        settings.channel.dummy_k_max = 4
        settings.channel.dummy_t_max = 0.01
        assert settings.dummy_params == (0, 0.0)

    def test_on(self):
        settings = AppConfig()
        settings.channel.dummy_packets = True
        settings.channel.dummy_k_max = 4
        settings.channel.dummy_t_max = 0.01
        assert settings.dummy_params == (4, 0.01)

    def test_project_defaults(self):
        from config import SETTINGS
        assert SETTINGS.channel.dummy_k_max == 4
        assert SETTINGS.dummy_params == (0, 0.0)
