from lib.config_schema import AppConfig, setup_app_config

# Setup
SETTINGS = AppConfig()

# Channel
SETTINGS.channel.timeout = 5.0
SETTINGS.channel.dummy_packets = False
SETTINGS.channel.dummy_k_max = 4
SETTINGS.channel.dummy_t_max = 0.001

# Extractor
SETTINGS.extractor.timeout = 10.0
SETTINGS.extractor.path_cap = 10000
SETTINGS.extractor.loop_bound = 3
SETTINGS.extractor.force_insensitive = False
SETTINGS.extractor.workers = 1

# Monitor
SETTINGS.monitor.listen = "127.0.0.1:7700"
SETTINGS.monitor.status_listen = "127.0.0.1:7701"
SETTINGS.monitor.key_file = "monitor.key"
SETTINGS.monitor.timeout = 5.0
SETTINGS.monitor.queue_capacity = 1024
SETTINGS.monitor.log_dir = "log"
SETTINGS.monitor.keep_reading_untrusted = True

# Target
SETTINGS.target.monitor = "127.0.0.1:7700"
SETTINGS.target.threads = 1
SETTINGS.target.max_exception_retries = 3
SETTINGS.target.max_call_depth = 256

# Export
SETTINGS = setup_app_config(base_settings=SETTINGS)
