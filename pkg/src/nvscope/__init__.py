"""Host stack for NV-center ODMR magnetometry."""
