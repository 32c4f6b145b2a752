# Tests for genro-vad
