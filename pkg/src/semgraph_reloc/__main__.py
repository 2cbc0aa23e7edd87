import sys

from semgraph_reloc.cli import main

sys.exit(main())
