import sys

from uncertain_ner.cli import main

sys.exit(main())
