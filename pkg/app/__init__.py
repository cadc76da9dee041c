# tomllib needs 3.11; numpy wheels are tested up to 3.13
import sys


if sys.version_info[:2] < (3, 11) or sys.version_info[:2] > (3, 13):
    print(
        "Warning: tsflora is tested on Python 3.11-3.13, running {ver}".format(
            ver=".".join(map(str, sys.version_info[:3]))
        )
    )
