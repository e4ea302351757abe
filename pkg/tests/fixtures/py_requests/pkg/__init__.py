from pkg import helpers
